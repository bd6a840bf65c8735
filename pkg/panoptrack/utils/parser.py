from argparse import ArgumentParser, Namespace
from typing import Any, Dict, List, Optional, Sequence


def _extend_help_text(message: str, default: Any, choices: Optional[Sequence[str]]) -> str:
    if choices:
        message += " (one of " + ", ".join(str(c) for c in choices) + ")"
    if default not in (None, False, [], ()):
        message += f" [default: {default}]"
    return message


def _get_order(args: Dict[str, Dict[str, Any]]) -> List[str]:
    with_sh = []
    min_sh = []
    without_sh = []
    for name, params in args.items():
        shorthands = params.get("shorthands", [])
        if shorthands:
            with_sh.append(name)
            min_sh.append(min(shorthands))
        else:
            without_sh.append(name)
    return [name for _, name in sorted(zip(min_sh, with_sh))] + sorted(without_sh)


def _process_optional(parser: ArgumentParser, args: Dict[str, Dict[str, Any]]) -> None:
    for name in _get_order(args=args):
        params = args[name].copy()
        shorthands = [f"-{shorthand}" for shorthand in params.pop("shorthands", [])]
        names_flags = sorted(shorthands) + [f"--{name.replace('_', '-')}"]
        if "help" in params and params.get("action") not in ("version", "store_true"):
            params["help"] = _extend_help_text(
                message=params["help"],
                default=params.get("default"),
                choices=params.pop("help_choices", None),
            )
        params.pop("help_choices", None)
        params.pop("postprocess", None)
        parser.add_argument(*names_flags, **params)
    return None


def _postprocess(
    args: Dict[str, Any], params: Dict[str, Dict[str, Any]]
) -> Dict[str, Any]:
    for name, value in args.items():
        if value is None:
            continue
        for func in params.get(name, {}).get("postprocess", []):
            value = func(value)
        args[name] = value
    return args


def build_parser(
    description: str,
    common: Dict[str, Dict[str, Any]],
    commands: Dict[str, Dict[str, Any]],
    version: Optional[str] = None,
) -> ArgumentParser:
    parser = ArgumentParser(prog="panoptrack", description=description)
    if version is not None:
        parser.add_argument(
            "--version",
            action="version",
            help="display version information and exit",
            version=f"%(prog)s {version}",
        )
    subparsers = parser.add_subparsers(dest="command", metavar="<command>", required=True)
    for command, declared in commands.items():
        subparser = subparsers.add_parser(
            command, help=declared["help"], description=declared["help"]
        )
        _process_optional(parser=subparser, args=declared["options"] | common)
    return parser


def parse_arguments(
    description: str,
    common: Dict[str, Dict[str, Any]],
    commands: Dict[str, Dict[str, Any]],
    argv: Optional[Sequence[str]] = None,
    version: Optional[str] = None,
) -> Dict[str, Any]:
    parser = build_parser(
        description=description, common=common, commands=commands, version=version
    )
    namespace: Namespace = parser.parse_args(argv)
    args = vars(namespace)
    return _postprocess(
        args=args, params=commands[args["command"]]["options"] | common
    )
