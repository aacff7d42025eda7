import logging
import os
from datetime import datetime
from typing import Optional

from services.blocks.config import AppConfig


class AppLogger:
    def __init__(self, log_dir: Optional[str] = None):
        self.logger = logging.getLogger("fkbridge")
        self.logger.setLevel(logging.INFO)

        if not self.logger.handlers:
            # log directory is created on first use
            log_dir = log_dir or AppConfig.LOG_DIR
            os.makedirs(log_dir, exist_ok=True)

            # one log file per day
            fh = logging.FileHandler(os.path.join(log_dir, f"app_{datetime.now().strftime('%Y%m%d')}.log"))
            fh.setLevel(logging.INFO)

            formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
            fh.setFormatter(formatter)
            self.logger.addHandler(fh)

    def log_kernel_build(self, method, n, s, t, pieces, seconds, tail=None):
        """One kernel build (tail = series truncation estimate, when known)"""
        tail_txt = f" | SeriesTail={tail:.3e}" if tail is not None else ""
        self.logger.info(
            f"KERNEL | Method={method} | N={n} | s={s:.6g} | t={t:.6g} | Pieces={pieces} | Time={seconds:.2f}s{tail_txt}"
        )

    def log_solver(self, iterations, residual, converged):
        self.logger.info(f"SOLVER | Iterations={iterations} | Residual={residual:.3e} | Converged={converged}")

    def log_simulation(self, n_paths, dt, boundary_hits):
        self.logger.info(f"SIMULATE | Paths={n_paths} | dt={dt:.3g} | BoundaryHits={boundary_hits}")

    def log_check(self, name, value, tol, passed):
        self.logger.info(f"CHECK | {name} | Value={value:.6g} | Tol={tol:.3g} | Pass={passed}")

    def info(self, msg):
        self.logger.info(msg)

    def warning(self, msg):
        self.logger.warning(msg)

    def log_error(self, module, error, traceback):
        """Error with its traceback"""
        self.logger.error(f"ERROR | Module={module} | Error={error}\n{traceback}")


_instance: Optional[AppLogger] = None


def get_logger() -> AppLogger:
    global _instance
    if _instance is None:
        _instance = AppLogger()
    return _instance
