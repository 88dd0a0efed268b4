"""
CXR Diffusion Workbench Main Entry Point
Единая точка входа: python -m app.main <command> --config path.json [--seed N] [--out dir]
"""

import argparse
import asyncio
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from typing import Awaitable, Callable, Dict, List, Optional, Tuple

from app.config import COMMANDS, load_run_config, settings
from app.database.connection import close_db, init_db
from app.database.repository import MetricRepository, RunRepository
from app.errors import ConfigError, WorkbenchError
from app.services.artifacts import ArtifactWriter
from app.services.metrics import json_safe

logger = logging.getLogger(__name__)

Handler = Callable[..., Awaitable[Dict]]


class JsonLineFormatter(logging.Formatter):
    """Одна JSON-строка на запись: ts, level, logger, message."""

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(timespec="milliseconds"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            entry["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False)


def setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    logging.basicConfig(level=settings.log_level, handlers=[handler], force=True)


def command_handlers() -> Dict[str, Tuple[Handler, str]]:
    """Команда -> (обработчик, краткое описание) в порядке COMMANDS."""
    from app.handlers import finetune, generation, projection, reconstruction, text_bench

    handlers = {
        "recon-eval": (reconstruction.cmd_recon_eval, "Evaluate VAE reconstructions"),
        "text-bench": (text_bench.cmd_text_bench, "Benchmark text encoders with CheXpert@k"),
        "train-projection": (projection.cmd_train_projection, "Train the embedding projection"),
        "train-ti": (finetune.cmd_train_ti, "Textual inversion of a new token"),
        "train-unet": (finetune.cmd_train_unet, "Fine-tune the denoiser"),
        "generate": (generation.cmd_generate, "Generate images for prompts"),
        "classify-eval": (generation.cmd_classify_eval, "Classify generated images"),
        "fid-grid": (generation.cmd_fid_grid, "FID of bundles against references"),
    }
    return {name: handlers[name] for name in COMMANDS}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.main", description="CXR Diffusion Workbench")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (handler, help_text) in command_handlers().items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="JSON run config")
        sub.add_argument("--seed", type=int, default=None, help="Override config seed")
        sub.add_argument("--out", default=None, help="Override output directory")
        sub.set_defaults(func=handler)
    return parser


def _config_hash(path: str) -> str:
    try:
        with open(path, "rb") as f:
            return hashlib.sha256(f.read()).hexdigest()
    except OSError:
        return ""


async def run(command: str, config_path: str, seed: Optional[int] = None,
              out_dir: Optional[str] = None, handler: Optional[Handler] = None) -> int:
    """
    Выполнить одну команду.

    Returns:
        Код выхода: 0 успех, 1 непредвиденная ошибка, 2 конфиг, 3 данные, 4 численная
    """
    await init_db()
    run_id = await RunRepository.create(command, seed, _config_hash(config_path))
    summary: Dict = {"command": command}
    exit_code = 0
    try:
        cfg = load_run_config(config_path, seed=seed, out_dir=out_dir)
        if cfg.command != command:
            raise ConfigError(f"Config is for command {cfg.command}, not {command}")
        await RunRepository.set_seed(run_id, cfg.seed)
        logger.info(f"Run {run_id}: {command} seed={cfg.seed} out={cfg.out_path}")

        writer = ArtifactWriter(cfg.out_path)
        handler = handler or command_handlers()[command][0]
        summary.update(await handler(cfg, writer))
        summary["seed"] = cfg.seed
        summary["artifacts"] = writer.names
        writer.commit()
        summary["status"] = "ok"
    except WorkbenchError as e:
        exit_code = e.exit_code
        summary.update({"status": "error", "error": type(e).__name__, "message": str(e)})
        logger.error(f"{type(e).__name__}: {e}")
    except Exception as e:
        exit_code = 1
        summary.update({"status": "error", "error": type(e).__name__, "message": str(e)})
        logger.exception("Unexpected error")

    summary["exit_code"] = exit_code
    await RunRepository.finish(run_id, summary["status"], exit_code, summary)
    await MetricRepository.add_many(run_id, summary)
    await close_db()

    print(json.dumps(json_safe(summary), sort_keys=True, default=str))
    logger.info(f"Run {run_id} finished with exit code {exit_code}")
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    """Главная функция CLI."""
    setup_logging()
    args = build_parser().parse_args(argv)
    return asyncio.run(run(args.command, args.config, args.seed, args.out, handler=args.func))


if __name__ == "__main__":
    sys.exit(main())
