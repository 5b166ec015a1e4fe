import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, TextIO

if __package__ in (None, ""):
    sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import numpy as np
import torch

from python_deformscan.bench import DEFAULT_SIZES, run_bench
from python_deformscan.config import RunConfig, load_config
from python_deformscan.errors import DeformScanError
from python_deformscan.gaussian import gdr_limit_report
from python_deformscan.gradcheck import GradChecks
from python_deformscan.model import build_model, expected_shapes, load_state_arrays, state_arrays
from python_deformscan.persistence import load_params, save_params
from python_deformscan.pointcloud_io import FORMATS, load_pointcloud
from python_deformscan.serialization import DEFAULT_ORDER, HilbertConfig, serialize

logger = logging.getLogger("python_deformscan")

DEFAULT_SIGMAS = "1e-3,0.2,1e6"


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _emit(records: Iterable[Dict], out: TextIO) -> None:
    for record in records:
        out.write(json.dumps(record) + "\n")
    out.flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformscan", description="Deformable point cloud scanning toolkit")
    parser.add_argument("--verbose", action="store_true", help="log debug details to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("serialize", help="Hilbert order of a point cloud as JSON lines")
    p.add_argument("cloud")
    p.add_argument("--order", type=int, default=DEFAULT_ORDER)
    p.add_argument("--format", choices=FORMATS, default=None)

    p = sub.add_parser("deform-scan", help="embed a cloud and run the stages")
    p.add_argument("cloud")
    p.add_argument("--config", default=None)
    p.add_argument("--params", default=None, help="parameter file to load")
    p.add_argument("--save-params", default=None, help="write the parameters used to this file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None, help="write JSON lines here instead of stdout")
    p.add_argument("--format", choices=FORMATS, default=None)

    p = sub.add_parser("gdr-demo", help="limit behaviour of the reordering weights")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--sigmas", type=_float_list, default=_float_list(DEFAULT_SIGMAS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--matrix", action="store_true", help="include the interaction matrix")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", default="all")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="wall-times of the main kernels")
    p.add_argument("--n", type=_int_list, default=list(DEFAULT_SIZES))
    p.add_argument("--repeats", type=int, default=3)
    return parser


def cmd_serialize(args, out: TextIO) -> int:
    cloud = load_pointcloud(args.cloud, args.format)
    order = serialize(cloud.coords, HilbertConfig(order=args.order))
    _emit(
        ({"index": i, "rank": int(order.base_index[i]), "key": int(order.keys[i])} for i in range(len(cloud))),
        out,
    )
    return 0


def features_digest(features: torch.Tensor) -> str:
    array = np.ascontiguousarray(features.detach().numpy(), dtype="<f8")
    return hashlib.sha256(array.tobytes()).hexdigest()


def cmd_deform_scan(args, out: TextIO) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    torch.set_num_threads(1)

    cloud = load_pointcloud(args.cloud, args.format)
    model = build_model(cfg)
    params_path = args.params or cfg.params_path
    if params_path:
        load_state_arrays(model, load_params(params_path, expected_shapes(model)))
    if args.save_params:
        save_params(args.save_params, state_arrays(model))

    with torch.no_grad():
        result = model(cloud)
    records = [record.to_record() for record in result.stages]
    features = result.tokens.features
    records.append({
        "record": "output",
        "tokens": int(features.shape[1]),
        "dim": int(features.shape[2]),
        "base_index": result.tokens.base_index.tolist(),
        "digest": features_digest(features),
    })

    output_path = args.output or cfg.output_path
    if output_path:
        with open(output_path, "w", encoding="utf-8") as handle:
            _emit(records, handle)
    else:
        _emit(records, out)
    return 0


def cmd_gdr_demo(args, out: TextIO) -> int:
    rng = np.random.default_rng(args.seed)
    delta_t = rng.uniform(-0.4, 0.4, size=args.n)
    if args.n >= 2:
        # une ligne équidistante entre les positions 0 et 1
        delta_t[0] = 0.5
    reports = gdr_limit_report(torch.arange(args.n), torch.from_numpy(delta_t), args.sigmas, with_matrix=args.matrix)
    _emit((report.to_record() for report in reports), out)
    return 0


def cmd_gradcheck(args, out: TextIO) -> int:
    checks = GradChecks(seed=args.seed)
    reports = checks.run_all() if args.op == "all" else [checks.execute_check(args.op)]
    _emit((report.to_record() for report in reports), out)
    for report in reports:
        if not report.passed:
            logger.error("%s", report.message)
    return 0 if all(report.passed for report in reports) else 1


def cmd_bench(args, out: TextIO) -> int:
    _emit(run_bench(args.n, args.repeats), out)
    return 0


COMMANDS = {
    "serialize": cmd_serialize,
    "deform-scan": cmd_deform_scan,
    "gdr-demo": cmd_gdr_demo,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv: Optional[List[str]] = None, out: Optional[TextIO] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, out or sys.stdout)
    except DeformScanError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
