#!/usr/bin/env python3
"""
akd-lab MCP Server

A Model Context Protocol server exposing the akd-lab experiment commands as
tools over stdio. Each tool runs the CLI in a subprocess.
"""

import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from mcp.server.fastmcp import FastMCP

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger("akd-lab-mcp")

mcp = FastMCP("akd-lab")


async def run_akd_command(args: List[str], cwd: Optional[str] = None) -> Dict[str, Any]:
    """
    Run an akd-lab subcommand with the current interpreter.

    Args:
        args: Subcommand and its options, e.g. ``["evaluate", "--config", "exp.toml"]``
        cwd: Working directory to run the command in

    Returns:
        Dictionary with stdout, stderr, return_code and success
    """
    command = [sys.executable, "-m", "akd_lab", *args]
    try:
        logger.info(f"Running command: {' '.join(command)}")
        process = await asyncio.create_subprocess_exec(
            *command,
            stdout=asyncio.subprocess.PIPE,
            stderr=asyncio.subprocess.PIPE,
            cwd=cwd,
        )
        stdout, stderr = await process.communicate()
        return {
            "stdout": stdout.decode("utf-8").strip(),
            "stderr": stderr.decode("utf-8").strip(),
            "return_code": process.returncode,
            "success": process.returncode == 0,
        }
    except Exception as e:
        return {
            "stdout": "",
            "stderr": f"Error running command: {e}",
            "return_code": 1,
            "success": False,
        }


def _experiment_args(command: str, config_path: str, output_dir: Optional[str]) -> List[str]:
    args = [command, "--config", config_path]
    if output_dir:
        args.extend(["--output-dir", output_dir])
    return args


def _format(result: Dict[str, Any], action: str) -> str:
    if result["success"]:
        return f"✅ {action} finished\n{result['stdout']}"
    return f"❌ {action} failed (exit {result['return_code']}): {result['stderr']}"


@mcp.tool()
async def train_teacher(config_path: str, output_dir: Optional[str] = None, jobs: int = 1) -> str:
    """
    Train the teacher model, or every member of a teacher ensemble.

    Args:
        config_path: Path to the experiment TOML file
        output_dir: Optional override of the config's output_dir
        jobs: Number of ensemble members trained in parallel
    """
    args = _experiment_args("train-teacher", config_path, output_dir) + ["--jobs", str(jobs)]
    return _format(await run_akd_command(args), "Teacher training")


@mcp.tool()
async def train_student(config_path: str, output_dir: Optional[str] = None) -> str:
    """
    Distill a student from previously trained teacher checkpoints.

    Args:
        config_path: Path to the experiment TOML file
        output_dir: Optional override of the config's output_dir
    """
    result = await run_akd_command(_experiment_args("train-student", config_path, output_dir))
    return _format(result, "Student training")


@mcp.tool()
async def evaluate(config_path: str, output_dir: Optional[str] = None) -> str:
    """
    Clean and robust accuracy of the teachers, the ensemble and the student.

    Args:
        config_path: Path to the experiment TOML file
        output_dir: Optional override of the config's output_dir
    """
    return _format(await run_akd_command(_experiment_args("evaluate", config_path, output_dir)), "Evaluation")


@mcp.tool()
async def analyze(config_path: str, output_dir: Optional[str] = None) -> str:
    """
    Difficulty ranking, trajectories, improvement curves and entropy series.

    Args:
        config_path: Path to the experiment TOML file
        output_dir: Optional override of the config's output_dir
    """
    return _format(await run_akd_command(_experiment_args("analyze", config_path, output_dir)), "Analysis")


def format_report(output_dir: Path) -> str:
    metrics = sorted((output_dir / "metrics").glob("*.jsonl"))
    if not metrics:
        return f"📋 No metrics found in {output_dir}"
    lines = [f"📊 Metrics in {output_dir}:"]
    for path in metrics:
        for line in path.read_text(encoding="utf-8").splitlines():
            record = json.loads(line)
            robust = record.get("robust_acc")
            robust_text = f"{record['attack']}={robust:.4f}" if robust is not None else "no attack"
            lines.append(f"  {record['model']}: clean={record['clean_acc']:.4f} {robust_text}")
    return "\n".join(lines)


@mcp.tool()
async def show_report(output_dir: str) -> str:
    """
    Summarize the metrics files of an experiment.

    Args:
        output_dir: The experiment output directory
    """
    try:
        return format_report(Path(output_dir))
    except (OSError, json.JSONDecodeError, KeyError) as e:
        return f"❌ Failed to read metrics: {e}"


def main():
    """Main entry point for the MCP server."""
    mcp.run()


if __name__ == "__main__":
    main()
