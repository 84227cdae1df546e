"""Command-line front end.

    blindfold-sim run <scenario> [--seed N] [--paranoid] [--report text|kv]
                      [--trace <file>]
    blindfold-sim adapt <in> <out> --dev-key <file> --guardian-pub <file>
    blindfold-sim keygen --dev-out <file> --guardian-out <file> [--seed N]
    blindfold-sim mkimage <name> <out>

Exit code 0 iff every assert passed, every injected attack was contained,
and the confidentiality sweep stayed clean.
"""

import argparse
import random
import sys

from . import binadapt, crypto
from .harness import parse_scenario, run


def _cmd_run(args) -> int:
    with open(args.scenario, encoding="utf-8") as fh:
        text = fh.read()
    scenario = parse_scenario(text)
    report = run(scenario, seed=args.seed, paranoid=args.paranoid, trace=bool(args.trace))
    out = report.to_kv() if args.report == "kv" else report.to_text()
    sys.stdout.write(out)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(out)
    return 0 if report.ok else 1


def _read_key_seed(path: str) -> bytes:
    with open(path, encoding="utf-8") as fh:
        return bytes.fromhex(fh.read().strip())


def _cmd_adapt(args) -> int:
    with open(args.input, "rb") as fh:
        raw = binadapt.parse(fh.read())
    dev = crypto.keypair_from_seed(_read_key_seed(args.dev_key))
    with open(args.guardian_pub, encoding="utf-8") as fh:
        kex_hex, sign_hex = fh.read().split()
    gpub = crypto.PublicKey(kex=bytes.fromhex(kex_hex), sign=bytes.fromhex(sign_hex))
    rng = random.Random(args.seed)
    adapted = binadapt.adapt(raw, dev, gpub, rng)
    with open(args.output, "wb") as fh:
        fh.write(binadapt.serialize(adapted))
    print(f"adapted {args.input} -> {args.output}")
    return 0


def _cmd_keygen(args) -> int:
    rng = random.Random(args.seed)
    dev_seed = rng.randbytes(32)
    guardian = crypto.gen_keypair(rng)
    with open(args.dev_out, "w", encoding="utf-8") as fh:
        fh.write(dev_seed.hex() + "\n")
    pub = guardian.public()
    with open(args.guardian_out, "w", encoding="utf-8") as fh:
        fh.write(f"{pub.kex.hex()} {pub.sign.hex()}\n")
    print(f"wrote {args.dev_out} and {args.guardian_out}")
    return 0


def _cmd_mkimage(args) -> int:
    image = binadapt.build_demo_image(args.name)
    with open(args.output, "wb") as fh:
        fh.write(binadapt.serialize(image))
    print(f"wrote raw image {args.output}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="blindfold-sim")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="execute a scenario file")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paranoid", action="store_true", help="sweep after every Guardian call")
    p.add_argument("--report", choices=("text", "kv"), default="text")
    p.add_argument("--trace", default="", help="also write the report to this file")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("adapt", help="adapt a raw image for protected execution")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--dev-key", required=True)
    p.add_argument("--guardian-pub", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_adapt)

    p = sub.add_parser("keygen", help="generate developer and Guardian key files")
    p.add_argument("--dev-out", default="dev.key")
    p.add_argument("--guardian-out", default="guardian.pub")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_keygen)

    p = sub.add_parser("mkimage", help="emit a built-in raw demo image")
    p.add_argument("name", choices=binadapt.BUILTIN_IMAGES)
    p.add_argument("output")
    p.set_defaults(fn=_cmd_mkimage)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
