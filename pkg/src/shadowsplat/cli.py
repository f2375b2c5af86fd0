import argparse
from typing import Any, List, Optional, Tuple

from .gradcheck import DEFAULT_SAMPLES, LOSS_NAMES
from .pipeline import SHADOW_RESOLUTION

COMMANDS = ("gen-scene", "train", "render", "relight", "gradcheck", "eval", "bench-shadow")


def parse_vector(text: str) -> Tuple[float, float, float]:
    """``"x,y,z"`` as a 3-tuple of floats; argparse reports anything else."""
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z but got {text!r}")
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values but got {text!r}")
    return values  # type: ignore[return-value]


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer but got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None,
                        help='Random seed (default: the config or spec value, else 0)')
    common.add_argument('--threads', type=_positive, default=None,
                        help='Tile worker threads; 1 is deterministic (default: 1)')
    common.add_argument('--loglevel', default="info",
                        choices=["debug", "info", "warning", "error"])
    common.add_argument('--logfile', type=str)

    parser = argparse.ArgumentParser(
        prog="shadowsplat",
        description="ShadowSplat - Gaussian-splat inverse rendering with shadow-guided relighting")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-scene", parents=[common],
                       help='Generate a synthetic scene and its ground-truth dataset')
    p.add_argument('--spec', type=str, help='Scene spec JSON (default: the desk scene)')
    p.add_argument('--out', type=str, required=True, help='Output dataset directory')

    p = sub.add_parser("train", parents=[common], help='Run stage 1, stage 2 or both')
    p.add_argument('--config', type=str, help='Run configuration JSON')
    p.add_argument('--stage', choices=["1", "2", "all"], default="all")
    p.add_argument('--scene', type=str,
                   help="Starting scene (default: the dataset's init_scene)")
    p.add_argument('--data', type=str, required=True, help='Dataset directory or dataset.json')
    p.add_argument('--out', type=str, required=True, help='Output directory')

    p = sub.add_parser("render", parents=[common], help='Render one view of a scene')
    p.add_argument('--scene', type=str, required=True)
    p.add_argument('--camera', type=str, required=True,
                   help='Dataset view index or camera JSON file')
    p.add_argument('--data', type=str,
                   help='Dataset resolving a view index (default: next to the scene)')
    p.add_argument('--out', type=str, required=True, help='Image path (.png or .pfm)')
    p.add_argument('--gbuffer', type=str, help='Directory for G-buffer and visibility dumps')
    p.add_argument('--shadowmap', type=str, help='Grayscale shadow-map depth image')
    p.add_argument('--shadow-resolution', type=_positive, default=SHADOW_RESOLUTION)

    p = sub.add_parser("relight", parents=[common],
                       help='Re-shade every dataset view under a new sun or environment')
    p.add_argument('--scene', type=str, required=True)
    p.add_argument('--sun-dir', type=parse_vector, help='Direction toward the sun, x,y,z')
    p.add_argument('--sun-intensity', type=parse_vector, help='RGB sun intensity, r,g,b')
    p.add_argument('--env', type=str, help='Equirectangular environment map (.pfm)')
    p.add_argument('--lighting', type=str, help="Take sun and environment from a dataset lighting")
    p.add_argument('--data', type=str,
                   help='Dataset with the cameras (default: next to the scene, or the '
                        'dataset recorded by the train run that wrote it)')
    p.add_argument('--views', choices=["all", "train", "test"], default="all")
    p.add_argument('--out', type=str, required=True, help='Output directory')
    p.add_argument('--shadow-resolution', type=_positive, default=SHADOW_RESOLUTION)

    p = sub.add_parser("gradcheck", parents=[common],
                       help='Compare analytic and finite-difference gradients')
    p.add_argument('--scene', type=str, required=True)
    p.add_argument('--loss', choices=LOSS_NAMES, default="stage2")
    p.add_argument('--tol', type=float, default=1e-3, help='Relative tolerance (default: 1e-3)')
    p.add_argument('--atol', type=float, default=1e-6)
    p.add_argument('--samples', type=_positive, default=DEFAULT_SAMPLES)
    p.add_argument('--resolution', type=_positive, default=16, help='Check camera size in pixels')
    p.add_argument('--report', type=str, help='Write the report as JSON')

    p = sub.add_parser("eval", parents=[common], help='PSNR/SSIM/MAE of predictions')
    p.add_argument('--pred', type=str, required=True)
    p.add_argument('--gt', type=str, required=True)
    p.add_argument('--report', type=str, required=True, help='CSV report path')

    p = sub.add_parser("bench-shadow", parents=[common],
                       help='Time shadow-map against ray-traced visibility')
    p.add_argument('--scene', type=str, required=True)
    p.add_argument('--resolution', type=_positive, default=SHADOW_RESOLUTION)
    p.add_argument('--points', type=_positive, default=4096)
    p.add_argument('--repeats', type=_positive, default=3)
    return parser


def parse_args(argv: Optional[List[str]] = None) -> Any:
    """
    Parse command-line arguments for the shadowsplat tool.

    Every subcommand accepts ``--seed``, ``--threads``, ``--loglevel`` and
    ``--logfile``. ``--seed`` and ``--threads`` stay ``None`` when omitted
    so that values from a config or spec file win over the built-in
    defaults.

    Returns:
        argparse.Namespace: Parsed arguments; ``command`` names the subcommand.

    Examples:
        >>> args = parse_args(["eval", "--pred", "out", "--gt", "data/light_1",
        ...                    "--report", "report.csv"])
        >>> args.command
        'eval'

    Note:
        - Usage errors exit with status 2
        - ``relight`` needs at least one of --sun-dir, --sun-intensity,
          --env or --lighting; the handler checks this
    """
    return build_parser().parse_args(argv)
