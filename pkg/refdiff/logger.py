"""
ログとメトリクス管理
Application log and JSONL run metrics for refdiff.
"""
import json
import os
import logging
import time
from datetime import datetime, timezone
from typing import Optional
from pathlib import Path


def _utc_stamp() -> str:
    return datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%S.%fZ')


class ISO8601UTCFormatter(logging.Formatter):
    """ISO8601 UTC (Z) 形式。例: 2025-11-10T01:51:40.644Z"""
    converter = time.gmtime

    def formatTime(self, record, datefmt=None):
        # record.created は epoch 秒(float)。UTC に変換しミリ秒3桁を付与。
        dt = datetime.fromtimestamp(record.created, tz=timezone.utc)
        return dt.strftime('%Y-%m-%dT%H:%M:%S') + f'.{int(record.msecs):03d}Z'


class RunLogger:
    """
    refdiff のアプリケーションログと実行メトリクス

    With ``log_dir`` the application log goes to ``app.log`` and metrics to
    ``metrics.jsonl``. Without it the application log goes to stderr and
    metrics records are dropped.
    """

    def __init__(self, log_dir: Optional[str] = None, level: str = "WARNING"):
        self.configure(log_dir, level)

    def configure(self, log_dir: Optional[str] = None, level: str = "WARNING"):
        """ハンドラーを (再) 設定する"""
        self.log_dir = Path(log_dir) if log_dir else None

        self.app_logger = logging.getLogger("refdiff")
        self.metrics_logger = logging.getLogger("refdiff.metrics")
        self.metrics_logger.propagate = False

        for handler in list(self.app_logger.handlers):
            self.app_logger.removeHandler(handler)
        for handler in list(self.metrics_logger.handlers):
            self.metrics_logger.removeHandler(handler)

        app_formatter = ISO8601UTCFormatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            self.app_logger.setLevel(logging.INFO)
            app_handler = logging.FileHandler(self.log_dir / "app.log", encoding='utf-8')

            self.metrics_logger.setLevel(logging.INFO)
            metrics_handler = logging.FileHandler(self.log_dir / "metrics.jsonl", encoding='utf-8')
            metrics_handler.setFormatter(logging.Formatter('%(message)s'))
            self.metrics_logger.addHandler(metrics_handler)
        else:
            self.app_logger.setLevel(getattr(logging, level.upper(), logging.WARNING))
            app_handler = logging.StreamHandler()
            # メトリクスはファイル出力時のみ
            self.metrics_logger.addHandler(logging.NullHandler())

        app_handler.setFormatter(app_formatter)
        self.app_logger.addHandler(app_handler)

    @property
    def writes_metrics(self) -> bool:
        return self.log_dir is not None

    def log_app(self, level: str, message: str):
        """アプリケーションログ"""
        if level.lower() == "info":
            self.app_logger.info(message)
        elif level.lower() == "error":
            self.app_logger.error(message)
        elif level.lower() == "warning":
            self.app_logger.warning(message)
        elif level.lower() == "debug":
            self.app_logger.debug(message)
        else:
            self.app_logger.info(message)

    def log_run(self,
                subcommand: str,
                config_path: Optional[str],
                status: str,
                seed: Optional[int] = None,
                processing_time: Optional[float] = None,
                path_count: Optional[int] = None,
                ks_distance: Optional[float] = None,
                passed: Optional[bool] = None,
                error_message: Optional[str] = None):
        """実行メトリクス（JSON Lines形式）"""
        if not self.writes_metrics:
            return
        metrics_data = {
            "timestamp": _utc_stamp(),
            "event_type": "run",
            "subcommand": subcommand,
            "config_path": config_path,
            "status": status,
            "seed": seed,
            "processing_time": processing_time,
            "path_count": path_count,
            "ks_distance": ks_distance,
            "passed": passed,
            "error_message": error_message,
        }
        self.metrics_logger.info(json.dumps(metrics_data, ensure_ascii=False))

    def log_ensemble_status(self, completed_paths: int, total_paths: int, exploded_paths: int):
        """アンサンブル実行状態ログ"""
        if exploded_paths:
            self.app_logger.warning(
                f"ensemble finished with {exploded_paths}/{total_paths} exploded paths"
            )
        if not self.writes_metrics:
            return
        status_data = {
            "timestamp": _utc_stamp(),
            "event_type": "ensemble_status",
            "completed_paths": completed_paths,
            "total_paths": total_paths,
            "exploded_paths": exploded_paths,
        }
        self.metrics_logger.info(json.dumps(status_data, ensure_ascii=False))


def configure_run_logger() -> RunLogger:
    """環境変数 REFDIFF_LOG_DIR / REFDIFF_LOG_LEVEL からロガーを構成する"""
    run_logger.configure(
        log_dir=os.getenv("REFDIFF_LOG_DIR") or None,
        level=os.getenv("REFDIFF_LOG_LEVEL", "WARNING"),
    )
    return run_logger


# グローバルインスタンス
run_logger = RunLogger(
    log_dir=os.getenv("REFDIFF_LOG_DIR") or None,
    level=os.getenv("REFDIFF_LOG_LEVEL", "WARNING"),
)
