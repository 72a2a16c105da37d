"""
Organoid Fold Launcher
Runs scenario folds as independent subprocess jobs, a bounded number at a time;
the same module is the entry point of each job
"""

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from organoid_config import PipelineConfig, load_config, write_resolved_config
from organoid_errors import EXIT_OK, FoldJobFailed, exit_code_for
from organoid_logging import setup_logging

logger = logging.getLogger(__name__)

POLL_SECONDS = 1.0


def fold_command(cell_path: Path, fold: int, config_path: Path) -> List[str]:
    return [sys.executable, str(Path(__file__).resolve()), str(cell_path), str(fold), str(config_path)]


def launch_fold(cell_path: Path, fold: int, config_path: Path, log_path: Path) -> subprocess.Popen:
    """Start one fold job; its log goes to fold_<k>/job.log"""
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as log:
        return subprocess.Popen(fold_command(cell_path, fold, config_path), stdout=log, stderr=subprocess.STDOUT, text=True)


def _stop(processes: Sequence[Tuple[subprocess.Popen, str]]) -> None:
    for process, name in processes:
        if process.poll() is None:
            logger.warning("Stopping %s", name)
            process.terminate()
            try:
                process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                process.kill()


def launch_folds(cells, folds: int, pipeline: PipelineConfig, parallel: int):
    """Run every (cell, fold) as a job, at most `parallel` at once; returns the jobs' RunRecords"""
    from organoid_train import read_run_record

    config_path = write_resolved_config(pipeline, pipeline.runs_dir / "jobs")
    queue = []
    for cell in cells:
        cell_dir = pipeline.runs_dir / cell.cell_id
        cell_path = cell_dir / "cell.json"
        cell_dir.mkdir(parents=True, exist_ok=True)
        cell_path.write_text(json.dumps(cell.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        queue.extend((cell, cell_path, fold) for fold in range(folds))

    running: List[Tuple[subprocess.Popen, str, object, int]] = []
    failed = []
    try:
        while queue or running:
            while queue and len(running) < parallel:
                cell, cell_path, fold = queue.pop(0)
                name = f"{cell.cell_id}/fold_{fold}"
                logger.info("🚀 Launching %s", name)
                process = launch_fold(cell_path, fold, config_path, cell_path.parent / f"fold_{fold}" / "job.log")
                running.append((process, name, cell, fold))
            time.sleep(POLL_SECONDS)
            for job in list(running):
                process, name = job[0], job[1]
                code = process.poll()
                if code is None:
                    continue
                running.remove(job)
                if code == EXIT_OK:
                    logger.info("✅ %s finished", name)
                else:
                    logger.error("❌ %s exited with code %d", name, code)
                    failed.append(name)
    except KeyboardInterrupt:
        _stop([(job[0], job[1]) for job in running])
        raise

    if failed:
        raise FoldJobFailed(f"{len(failed)} fold job(s) failed: {', '.join(failed[:10])}")
    return [
        read_run_record(pipeline.runs_dir / cell.cell_id / f"fold_{fold}")
        for cell in cells
        for fold in range(folds)
    ]


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Run one fold of a scenario cell")
    parser.add_argument("cell", help="cell.json written by the scenario runner")
    parser.add_argument("fold", type=int)
    parser.add_argument("config", help="resolved pipeline config.json")
    args = parser.parse_args(argv)
    setup_logging()

    from organoid_scenarios import FoldRunner, RunCell

    try:
        pipeline = load_config(args.config)
        cell = RunCell(**json.loads(Path(args.cell).read_text(encoding="utf-8")))
        record = FoldRunner(pipeline)(cell, args.fold)
    except Exception as e:
        logger.error("❌ %s fold %d: %s", args.cell, args.fold, e)
        return exit_code_for(e)
    logger.info("✅ %s fold %d: F1 %.4f", record.cell_id, record.fold, record.metrics.f1 if record.metrics else float("nan"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
