"""Command-line front end: synthesis, training, coding, verification, sweeps.

Every command writes a manifest.json under --out-dir capturing the full
configuration, the artifact paths, and per-phase wall-clock timings, so a
run can be reproduced exactly from its manifest.  Exit codes: 0 success,
1 verification failure, 2 usage error, 3 I/O or parse error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    bd_rate,
    decorrelation_gain_experiment,
    density_law_experiment,
    index_shaping_experiment,
    rate_dominance_experiment,
    rd_sweep,
    read_rd_curves_csv,
    write_rd_curves_csv,
)
from .bitstream import (
    StreamHeader,
    pack,
    read_bitstream_file,
    unpack,
    write_bitstream_file,
)
from .grids import (
    LATENT_DOWNSAMPLE,
    SourceConfig,
    gauss_markov_sample,
    read_latent_file,
    write_latent_file,
)
from .quantizers import QuantizerSet, read_codebook_file, write_codebook_file
from .schemes import (
    CodedLatent,
    SchemeConfig,
    iq_decode,
    iq_encode,
    rd_decode,
    rd_encode,
    read_predictor_file,
    train_iq_model,
    train_rd_model,
    write_predictor_file,
)
from .timing import PhaseTimer

USAGE_ERROR = 2
IO_ERROR = 3
VERIFY_ERROR = 1

_GROUP_CODEBOOK_FILES = tuple(f"codebook_group{i}.efcb" for i in range(1, 5))
_HYPER_CODEBOOK_FILE = "codebook_hyper.efcb"
_PREDICTOR_FILE = "predictor.efpr"


class _CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _parse_ints(text: str, flag: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise _CliError(f"{flag} expects comma-separated integers, got {text!r}", USAGE_ERROR)


def _parse_floats(text: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise _CliError(f"{flag} expects comma-separated numbers, got {text!r}", USAGE_ERROR)


def _load_config_file(path: str | None) -> dict[str, str]:
    """key=value per line; '#' starts a comment; keys are flag dest names."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise _CliError(f"config file {path} not found", IO_ERROR)
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise _CliError(f"{path}:{lineno}: expected key=value, got {line!r}", USAGE_ERROR)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _apply_config(args: argparse.Namespace, parser_defaults: dict, config: dict[str, str]):
    """Config file values override builtin defaults but not explicit flags."""
    for key, raw in config.items():
        if not hasattr(args, key):
            raise _CliError(f"config key {key!r} matches no flag", USAGE_ERROR)
        if getattr(args, key) != parser_defaults.get(key):
            continue  # explicit flag wins
        default = parser_defaults.get(key)
        try:
            if isinstance(default, bool):
                value = raw.lower() in ("1", "true", "on", "yes")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            else:
                value = raw
        except ValueError:
            raise _CliError(f"config key {key!r}: cannot parse {raw!r}", USAGE_ERROR)
        setattr(args, key, value)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, artifacts: dict, timer: PhaseTimer | None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "timings_ms": (timer or PhaseTimer()).as_dict(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_required(path: str, reader, what: str):
    p = Path(path)
    if not p.is_file():
        raise _CliError(f"{what} file {path} not found", IO_ERROR)
    try:
        return reader(p)
    except ValueError as e:
        raise _CliError(f"{what} file {path}: {e}", IO_ERROR)


def _load_model(model_dir: str, scheme: str) -> tuple:
    d = Path(model_dir)
    groups = tuple(
        _read_required(str(d / name), read_codebook_file, "codebook")
        for name in _GROUP_CODEBOOK_FILES
    )
    hyper = None
    if (d / _HYPER_CODEBOOK_FILE).is_file():
        hyper = read_codebook_file(d / _HYPER_CODEBOOK_FILE)
    qset = QuantizerSet(groups=groups, hyper=hyper)
    predictor = None
    if scheme == "rd":
        predictor = _read_required(str(d / _PREDICTOR_FILE), read_predictor_file, "predictor")
    return qset, predictor


# ---------------------------------------------------------------------------
# Commands.


def cmd_synth(args) -> int:
    out = _out_dir(args)
    shape = _parse_ints(args.shape, "--shape")
    if len(shape) != 3:
        raise _CliError(f"--shape expects C,H,W, got {args.shape!r}", USAGE_ERROR)
    try:
        config = SourceConfig(
            channels=shape[0], height=shape[1], width=shape[2],
            rho=args.rho, variance=args.var, seed=args.seed,
        )
    except ValueError as e:
        raise _CliError(str(e), USAGE_ERROR)
    latent = gauss_markov_sample(config, index=args.index)
    path = out / args.out
    write_latent_file(path, latent)
    manifest_config = {
        "shape": list(shape), "rho": args.rho, "var": args.var,
        "seed": args.seed, "index": args.index,
    }
    _write_manifest(out, "synth", manifest_config, {"latent": path}, None)
    print(f"wrote {path}: shape {latent.shape}, rho={args.rho}, seed={args.seed}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    sizes = _parse_ints(args.Ks, "--Ks")
    if len(sizes) != 4:
        raise _CliError(f"--Ks expects four group sizes, got {len(sizes)}", USAGE_ERROR)
    if args.scheme not in ("rd", "iq"):
        raise _CliError(
            f"--scheme must be rd or iq for training codebooks, got {args.scheme!r}",
            USAGE_ERROR,
        )
    data_paths = [p for chunk in args.data for p in chunk.split(",")]
    if not data_paths:
        raise _CliError("--data requires at least one latent file", USAGE_ERROR)
    latents = [_read_required(p, read_latent_file, "latent") for p in data_paths]

    group_stage_sizes = tuple((k,) * args.stages for k in sizes)
    hyper_sizes = (args.Kz,) * args.stages if args.hyper == "on" else None

    artifacts = {}
    if args.scheme == "rd":
        predictor, qset = train_rd_model(
            latents, (), hyper_stage_sizes=hyper_sizes, m=None,
            iterations=args.iters, seed=args.seed, group_stage_sizes=group_stage_sizes,
        )
        write_predictor_file(out / _PREDICTOR_FILE, predictor)
        artifacts["predictor"] = out / _PREDICTOR_FILE
    else:
        if args.hyper == "on":
            raise _CliError("iq has no context and therefore no hyper grid", USAGE_ERROR)
        qset = train_iq_model(
            latents, (), iterations=args.iters, seed=args.seed,
            group_stage_sizes=group_stage_sizes,
        )
    for name, rvq in zip(_GROUP_CODEBOOK_FILES, qset.groups):
        write_codebook_file(out / name, rvq)
        artifacts[name] = out / name
    if qset.hyper is not None:
        write_codebook_file(out / _HYPER_CODEBOOK_FILE, qset.hyper)
        artifacts[_HYPER_CODEBOOK_FILE] = out / _HYPER_CODEBOOK_FILE

    config = {
        "scheme": args.scheme, "stages": args.stages, "Ks": list(sizes), "Kz": args.Kz,
        "hyper": args.hyper, "iters": args.iters, "seed": args.seed, "data": data_paths,
    }
    manifest = _write_manifest(out, "train", config, artifacts, None)
    print(f"trained {args.scheme} model: {len(artifacts)} files, manifest {manifest}")
    return 0


def cmd_encode(args) -> int:
    out = _out_dir(args)
    if args.scheme == "cm":
        raise _CliError(
            "cm produces entropy-coded streams, not fixed-length bitstreams;"
            " use the sweep command to measure it", USAGE_ERROR,
        )
    latent = _read_required(args.latent, read_latent_file, "latent")
    qset, predictor = _load_model(args.model_dir, args.scheme)
    timer = PhaseTimer()
    try:
        if args.scheme == "rd":
            coded = rd_encode(latent, predictor, qset, args.m, timer=timer)
        else:
            coded = iq_encode(latent, qset, args.m, timer=timer)
        header = StreamHeader(
            height=latent.height * LATENT_DOWNSAMPLE,
            width=latent.width * LATENT_DOWNSAMPLE,
            q=args.m,
        )
        with timer.phase("pack"):
            stream = pack(header, coded.hyper_stack, coded.group_stacks, qset)
    except ValueError as e:
        raise _CliError(str(e), VERIFY_ERROR)
    write_bitstream_file(out / args.out, stream)
    if args.recon is not None:
        write_latent_file(out / args.recon, coded.reconstruction)

    payload_bits = 8 * len(stream.payload)
    bpp = coded.rate_bits / (header.height * header.width)
    if abs(payload_bits - coded.rate_bits) > 7:
        raise _CliError(
            f"payload {payload_bits} bits deviates from the rate formula"
            f" {coded.rate_bits}", VERIFY_ERROR,
        )
    config = {
        "scheme": args.scheme, "m": args.m, "latent": args.latent,
        "model_dir": args.model_dir,
    }
    artifacts = {"bitstream": out / args.out}
    if args.recon is not None:
        artifacts["reconstruction"] = out / args.recon
    _write_manifest(out, "encode", config, artifacts, timer)
    print(f"encoded {args.latent}: {stream.bits} bits, bpp={bpp:.6f}")
    return 0


def cmd_decode(args) -> int:
    out = _out_dir(args)
    if args.scheme == "cm":
        raise _CliError("cm streams are not decodable from files; use sweep", USAGE_ERROR)
    stream = _read_required(args.stream, read_bitstream_file, "bitstream")
    qset, predictor = _load_model(args.model_dir, args.scheme)
    timer = PhaseTimer()
    try:
        with timer.phase("pack"):
            header, hyper_stack, group_stacks = unpack(stream, qset)
        shape = (
            qset.groups[0].dim,
            header.height // LATENT_DOWNSAMPLE,
            header.width // LATENT_DOWNSAMPLE,
        )
        coded = CodedLatent(
            scheme=args.scheme, shape=shape, reconstruction=None,
            rate_bits=float(8 * len(stream.payload)), m=header.q,
            group_stacks=group_stacks, hyper_stack=hyper_stack,
        )
        if args.scheme == "rd":
            recon = rd_decode(coded, predictor, qset, timer=timer)
        else:
            recon = iq_decode(coded, qset, timer=timer)
    except ValueError as e:
        raise _CliError(str(e), VERIFY_ERROR)
    write_latent_file(out / args.out, recon)
    artifacts = {"reconstruction": out / args.out}
    message = f"decoded {args.stream} -> {out / args.out}"
    config = {"scheme": args.scheme, "stream": args.stream, "model_dir": args.model_dir}
    if args.ref is not None:
        ref = _read_required(args.ref, read_latent_file, "reference latent")
        if ref.shape != recon.shape:
            raise _CliError(
                f"reference shape {ref.shape} does not match decoded {recon.shape}",
                VERIFY_ERROR,
            )
        mse = float(np.mean((ref.data - recon.data) ** 2))
        config["ref"] = args.ref
        message += f", mse={mse:.6e}"
    _write_manifest(out, "decode", config, artifacts, timer)
    print(message)
    return 0


_CLAIMS = ("shaping", "decorrelation", "dominance")


def cmd_verify_props(args) -> int:
    out = _out_dir(args)
    only = args.only
    if only is not None and only not in _CLAIMS:
        raise _CliError(f"--only must be one of {', '.join(_CLAIMS)}", USAGE_ERROR)
    claims = {}
    if only in (None, "shaping"):
        seed = args.seed if args.seed is not None else 1
        shaping = index_shaping_experiment(seed=seed)
        codebook = shaping.pop("codebook")
        density = density_law_experiment(codebook, seed=seed + 1)
        claims["shaping"] = {
            "training": shaping, "density_law": density,
            "passed": bool(shaping["passed"] and density["passed"]),
        }
    if only in (None, "decorrelation"):
        seed = args.seed if args.seed is not None else 5
        claims["decorrelation"] = decorrelation_gain_experiment(seed=seed)
    if only in (None, "dominance"):
        seed = args.seed if args.seed is not None else 5
        claims["dominance"] = rate_dominance_experiment(seed=seed)

    passed = all(c["passed"] for c in claims.values())
    report = {"claims": claims, "passed": passed}
    report_path = out / "verify_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "verify-props", {"only": only, "seed": args.seed},
                    {"report": report_path}, None)
    for name, claim in claims.items():
        print(f"{name}: {'PASS' if claim['passed'] else 'FAIL'}")
    print(f"report: {report_path}")
    return 0 if passed else VERIFY_ERROR


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    shape = _parse_ints(args.shape, "--shape")
    if len(shape) != 3:
        raise _CliError(f"--shape expects C,H,W, got {args.shape!r}", USAGE_ERROR)
    try:
        source = SourceConfig(
            channels=shape[0], height=shape[1], width=shape[2],
            rho=args.rho, variance=args.var, seed=args.source_seed,
        )
    except ValueError as e:
        raise _CliError(str(e), USAGE_ERROR)
    schemes = args.schemes.split(",")
    ms = _parse_ints(args.ms, "--ms")
    deltas = _parse_floats(args.deltas, "--deltas") if "cm" in schemes else ()
    sizes = _parse_ints(args.Ks, "--Ks")
    if len(sizes) != 4:
        raise _CliError(f"--Ks expects four group sizes, got {len(sizes)}", USAGE_ERROR)

    points = []
    for scheme in schemes:
        if scheme in ("rd", "iq"):
            points.extend(SchemeConfig(scheme=scheme, m=m) for m in ms)
        elif scheme == "cm":
            points.extend(SchemeConfig(scheme="cm", delta=d) for d in deltas)
        else:
            raise _CliError(f"unknown scheme {scheme!r}", USAGE_ERROR)
    if max(ms, default=0) > args.stages:
        raise _CliError(f"--ms reaches {max(ms)} but --stages is {args.stages}", USAGE_ERROR)

    try:
        curves = rd_sweep(
            source, points, (),
            train_indices=range(args.train_count),
            holdout_indices=range(1000, 1000 + args.holdout_count),
            group_stage_sizes=tuple((k,) * args.stages for k in sizes),
            iterations=args.iters, seed=args.seed,
        )
    except ValueError as e:
        raise _CliError(str(e), VERIFY_ERROR)
    csv_path = out / "rd_curves.csv"
    write_rd_curves_csv(csv_path, curves)
    config = {
        "shape": list(shape), "rho": args.rho, "var": args.var,
        "source_seed": args.source_seed, "schemes": schemes, "ms": list(ms),
        "deltas": list(deltas), "Ks": list(sizes), "stages": args.stages,
        "iters": args.iters, "seed": args.seed,
        "train_count": args.train_count, "holdout_count": args.holdout_count,
        "points": [
            {"scheme": c.scheme, "operating_point": p.operating_point, "seed": args.seed}
            for c in curves for p in c.points
        ],
    }
    _write_manifest(out, "sweep", config, {"rd_curves": csv_path}, None)
    for curve in curves:
        print(f"{curve.scheme}: {len(curve.points)} points")
    print(f"wrote {csv_path}")
    return 0


def _pick_curve(curves, scheme: str | None, path: str):
    if scheme is None:
        return curves[0]
    match = [c for c in curves if c.scheme == scheme]
    if not match:
        raise _CliError(f"{path} has no scheme {scheme!r}", USAGE_ERROR)
    return match[0]


def cmd_bdrate(args) -> int:
    out = _out_dir(args)
    anchor_curves = _read_required(args.anchor, read_rd_curves_csv, "curve CSV")
    test_curves = _read_required(args.test, read_rd_curves_csv, "curve CSV")
    anchor = _pick_curve(anchor_curves, args.anchor_scheme, args.anchor)
    test = _pick_curve(test_curves, args.test_scheme, args.test)
    try:
        value = bd_rate(anchor, test)
    except ValueError as e:
        raise _CliError(str(e), VERIFY_ERROR)
    text = f"{value:.2f}%"
    (out / "bdrate.txt").write_text(text + "\n")
    _write_manifest(
        out, "bdrate",
        {"anchor": args.anchor, "test": args.test,
         "anchor_scheme": anchor.scheme, "test_scheme": test.scheme},
        {"bdrate": out / "bdrate.txt"}, None,
    )
    print(text)
    return 0


# ---------------------------------------------------------------------------
# Parser.


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="rvqcodec",
        description="Entropy-coding-free latent codec: train, code, verify, sweep.",
    )
    parser.add_argument("--config", default=None, help="key=value file overriding defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("synth", help="sample a Gauss-Markov latent to an EFLT file")
    p.add_argument("--shape", required=True, help="C,H,W")
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--var", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index", type=int, default=0, help="latent index within the corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train codebooks (and predictor for rd)")
    p.add_argument("--scheme", default="rd", choices=("rd", "iq"))
    p.add_argument("--data", action="append", default=[], help="latent file(s), repeatable")
    p.add_argument("--stages", type=int, default=1)
    p.add_argument("--Ks", default="1024,512,256,128", help="per-group codebook sizes")
    p.add_argument("--Kz", type=int, default=1024, help="hyper codebook size")
    p.add_argument("--hyper", default="off", choices=("on", "off"))
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a latent to a fixed-length bitstream")
    p.add_argument("--scheme", default="rd", choices=("rd", "iq", "cm"))
    p.add_argument("--latent", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--m", type=int, required=True, help="stage count to transmit")
    p.add_argument("--out", default="stream.efbs")
    p.add_argument("--recon", default=None, help="also write the local reconstruction")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream to a latent")
    p.add_argument("--scheme", default="rd", choices=("rd", "iq", "cm"))
    p.add_argument("--stream", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--out", default="recon.eflt")
    p.add_argument("--ref", default=None, help="reference latent for MSE reporting")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("verify-props", help="run the claim-verification battery")
    p.add_argument("--only", default=None, help="|".join(_CLAIMS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_verify_props)

    p = sub.add_parser("sweep", help="rate-distortion sweep over schemes")
    p.add_argument("--shape", default="1,128,128")
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--var", type=float, default=1.0)
    p.add_argument("--source-seed", type=int, default=21)
    p.add_argument("--schemes", default="rd,iq")
    p.add_argument("--ms", default="1,2,3")
    p.add_argument("--deltas", default="2.0,1.0,0.5")
    p.add_argument("--Ks", default="256,128,64,32")
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--train-count", type=int, default=8)
    p.add_argument("--holdout-count", type=int, default=8)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bdrate", help="BD-rate between two curve CSV files")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--anchor-scheme", default=None)
    p.add_argument("--test-scheme", default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_bdrate)
    subparsers["bdrate"] = p

    for name in ("synth", "train", "encode", "decode", "verify-props", "sweep"):
        subparsers[name] = sub.choices[name]
    return parser, subparsers


def main(argv=None) -> int:
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    command_parser = subparsers[args.command]
    defaults = {
        key: command_parser.get_default(key)
        for key in vars(args)
        if key not in ("func", "command", "config")
    }
    try:
        config = _load_config_file(args.config)
        _apply_config(args, defaults, config)
        return args.func(args)
    except _CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
