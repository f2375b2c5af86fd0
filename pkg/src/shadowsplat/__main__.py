import sys
from typing import List, Optional

from .cli import parse_args
from .commands import HANDLERS
from .errors import ShadowSplatError
from .logger import setup_logger


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the shadowsplat tool.

    Parses the command line, sets up logging and runs one subcommand.
    Library errors are logged and turned into the process exit status.

    Returns:
        int: 0 on success (only reached when called programmatically with
        a successful command).

    Command-line usage:
        $ shadowsplat gen-scene --out data/desk
        $ shadowsplat train --data data/desk --out runs/desk --stage all
        $ shadowsplat render --scene runs/desk/scene.json --data data/desk --camera 3 --out v3.png
        $ shadowsplat relight --scene runs/desk/scene.json --data data/desk --lighting light_1 --out relit
        $ shadowsplat eval --pred relit --gt data/desk/light_1 --report report.csv
        $ shadowsplat gradcheck --scene data/desk/scene.json --loss stage2
        $ shadowsplat bench-shadow --scene data/desk/scene.json

    Note:
        - Exits 2 on bad parameters or input files (argparse usage errors too)
        - Exits 3 on numerical failure or a failing prior provider
        - Any other shadowsplat error exits 1
    """
    args = parse_args(argv)
    logger = setup_logger(args)
    try:
        HANDLERS[args.command](args, logger)
    except ShadowSplatError as e:
        logger.error(str(e))
        checkpoint = getattr(e, "checkpoint", None)
        if checkpoint:
            logger.error(f"Checkpoint saved to {checkpoint}")
        sys.exit(e.exit_code)
    return 0


if __name__ == "__main__":
    main()
