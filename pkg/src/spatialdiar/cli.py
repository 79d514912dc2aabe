"""Command-line entry point: simulate, train, infer, score, report.

All numeric behavior lives in the library modules; the CLI parses
configs, wires files together and writes run manifests. Exit codes:
0 success, 2 usage or config error, 3 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import audio_io, scoring
from .models import ModelConfig, build_model, build_standalone
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.tensor import NumericError
from .simulate import SimConfig, dataset_stats, simulate, spectrally_identical_pair
from .stitching import infer_segments, oracle_stitch
from .training import TrainConfig, make_training_examples, train

DATA_DIR_ENV = "SPATIALDIAR_DATA"


class UsageError(ValueError):
    pass


def _config_hash(payload: dict) -> str:
    canon = yaml.safe_dump(payload, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _created_stamp():
    # reproducible-builds convention: stamp only when SOURCE_DATE_EPOCH is set,
    # so identical runs produce byte-identical manifests by default
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    return int(epoch) if epoch else None


def write_manifest(path: Path, command: str, config: dict, inputs: list[str],
                   outputs: list[str], seed: int | None = None,
                   stage: str | None = None) -> None:
    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(p) for p in outputs),
        "seed": seed,
        "stage": stage,
        "created": _created_stamp(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(manifest, sort_keys=True))


def _load_yaml(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config {path}: {exc}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def _build_config(cls, payload: dict, what: str):
    try:
        return cls.from_dict(payload)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {what} config: {exc}")


def _data_dir(arg) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise UsageError(f"no data directory given and {DATA_DIR_ENV} unset")


# ----------------------------------------------------------------------
# simulate

def _simulate_one(args):
    cfg_dict, out_dir, stem, index, pair_mode = args
    cfg = SimConfig.from_dict({**cfg_dict, "seed": cfg_dict.get("seed", 0) + index})
    audio, track = spectrally_identical_pair(cfg) if pair_mode else simulate(cfg)
    out_dir = Path(out_dir)
    file_id = f"{stem}_{index:03d}"
    wav = out_dir / f"{file_id}.wav"
    rttm = out_dir / f"{file_id}.rttm"
    audio_io.write_wav(wav, audio)
    audio_io.write_rttm(rttm, track, file_id)
    stats = dataset_stats(track)
    return file_id, str(wav), str(rttm), round(stats.overlap_ratio, 4)


def cmd_simulate(args) -> int:
    payload = _load_yaml(args.config)
    num_files = int(payload.pop("num_files", 1))
    stem = payload.pop("stem", "meeting")
    pair_mode = bool(payload.pop("spectrally_identical_pair", False))
    sim_cfg = _build_config(SimConfig, payload, "simulation")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(sim_cfg.to_dict(), str(out_dir), stem, i, pair_mode) for i in range(num_files)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_simulate_one, jobs))
    else:
        results = [_simulate_one(j) for j in jobs]
    files = {fid: {"wav": w, "rttm": r, "overlap_ratio": o} for fid, w, r, o in results}
    manifest_cfg = {"sim": sim_cfg.to_dict(), "num_files": num_files, "stem": stem,
                    "spectrally_identical_pair": pair_mode}
    geometry = {"mic_positions": [list(p) for p in sim_cfg.mic_positions]}
    (out_dir / "geometry.yaml").write_text(yaml.safe_dump(geometry, sort_keys=True))
    write_manifest(out_dir / "manifest.yaml", "simulate", {**manifest_cfg, "files": files},
                   inputs=[str(args.config)],
                   outputs=[v["wav"] for v in files.values()]
                           + [v["rttm"] for v in files.values()]
                           + [str(out_dir / "geometry.yaml")],
                   seed=sim_cfg.seed)
    print(f"wrote {num_files} recording(s) to {out_dir}")
    return 0


# ----------------------------------------------------------------------
# train

def _load_dataset(data_dir: Path, channel_count: int | None, selection_mode: str):
    """(audio, track) pairs for every wav with a matching rttm."""
    wavs = sorted(data_dir.glob("*.wav"))
    if not wavs:
        raise UsageError(f"no wav files in {data_dir}")
    positions = None
    geom = data_dir / "geometry.yaml"
    if geom.exists():
        positions = np.asarray(yaml.safe_load(geom.read_text())["mic_positions"])
    fixed_channels = None
    pairs = []
    for wav in wavs:
        rttm = wav.with_suffix(".rttm")
        if not rttm.exists():
            raise UsageError(f"missing reference rttm for {wav}")
        audio = audio_io.read_wav(wav)
        if positions is not None and len(positions) == audio.num_channels:
            audio.mic_positions = positions
        if channel_count and channel_count < audio.num_channels:
            if audio.mic_positions is None:
                raise UsageError("channel selection requires geometry.yaml with mic positions")
            if selection_mode == "fixed":
                if fixed_channels is None:
                    fixed_channels = audio_io.select_channels(audio.mic_positions, channel_count)
                chans = fixed_channels
            else:
                chans = audio_io.select_channels(audio.mic_positions, channel_count)
            audio = audio.select(chans)
        pairs.append((audio, audio_io.parse_rttm_file(rttm)))
    return pairs


def cmd_train(args) -> int:
    payload = _load_yaml(args.config)
    target = payload.pop("target", "eend")
    if target not in ("eend", "aux"):
        raise UsageError("train target must be 'eend' or 'aux'")
    input_kinds = payload.pop("input_kinds", "all")
    channel_count = payload.pop("channel_count", None)
    selection_mode = payload.pop("channel_selection", "per_session")
    model_cfg = _build_config(ModelConfig, payload.get("model", {}), "model")
    train_cfg = _build_config(TrainConfig, payload.get("train", {}), "train")
    data_dir = _data_dir(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if train_cfg.stage == "frozen_aux" and target == "eend" and not args.aux:
        raise UsageError("stage frozen_aux requires --aux with a pretrained auxiliary checkpoint")
    if train_cfg.stage == "joint_finetune" and not args.init:
        raise UsageError("stage joint_finetune requires --init with the frozen-stage checkpoint")

    dataset = _load_dataset(data_dir, channel_count, selection_mode)
    examples = []
    for audio, track in dataset:
        examples += make_training_examples(audio, track, train_cfg, model_cfg)

    if target == "aux":
        model = build_standalone(model_cfg, input_kinds=input_kinds)
    else:
        model = build_model(model_cfg)
        if args.init:
            load_checkpoint(model, args.init, partial=True)
        if args.aux:
            load_checkpoint(model, args.aux, partial=True)
    try:
        report = train(model, examples, train_cfg, checkpoint_dir=out_dir / "checkpoints")
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt)
    report_path = out_dir / "train_log.jsonl"
    report.write_jsonl(report_path)
    cfg_path = out_dir / "config.yaml"
    cfg_payload = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                   "target": target, "input_kinds": input_kinds}
    cfg_path.write_text(yaml.safe_dump(cfg_payload, sort_keys=True))
    write_manifest(out_dir / "manifest.yaml", "train", cfg_payload,
                   inputs=[str(args.config), str(data_dir)]
                          + ([str(args.aux)] if args.aux else [])
                          + ([str(args.init)] if args.init else []),
                   outputs=[str(ckpt), str(report_path), str(cfg_path)],
                   seed=train_cfg.seed, stage=train_cfg.stage)
    print(f"final loss {report.final_loss:.4f} after {report.records[-1][0]} steps -> {ckpt}")
    return 0


# ----------------------------------------------------------------------
# infer

def cmd_infer(args) -> int:
    run_dir = Path(args.checkpoint).parent
    cfg_payload = _load_yaml(run_dir / "config.yaml")
    model_cfg = _build_config(ModelConfig, cfg_payload.get("model", {}), "model")
    train_cfg = _build_config(TrainConfig, cfg_payload.get("train", {}), "train")
    target = cfg_payload.get("target", "eend")
    if target == "aux":
        model = build_standalone(model_cfg, input_kinds=cfg_payload.get("input_kinds", "all"))
    else:
        model = build_model(model_cfg)
    load_checkpoint(model, args.checkpoint)
    if not Path(args.ref).exists():
        raise UsageError(f"oracle stitching requires the reference rttm: {args.ref} missing")
    ref = audio_io.parse_rttm_file(args.ref)
    audio = audio_io.read_wav(args.wav)
    ref = ref.with_duration(max(ref.duration, audio.duration))
    if args.sanity_ref:
        hyp = ref
    else:
        local_hyps = infer_segments(model, audio, train_cfg, model_cfg, ref=ref)
        hyp = oracle_stitch(local_hyps, ref)
    file_id = Path(args.wav).stem
    audio_io.write_rttm(args.out, hyp, file_id)
    write_manifest(Path(args.out).with_suffix(".manifest.yaml"), "infer",
                   {"checkpoint": str(args.checkpoint), "model": model_cfg.to_dict(),
                    "sanity_ref": bool(args.sanity_ref)},
                   inputs=[str(args.checkpoint), str(args.wav), str(args.ref)],
                   outputs=[str(args.out)], seed=model_cfg.seed)
    print(f"wrote hypothesis rttm -> {args.out}")
    return 0


# ----------------------------------------------------------------------
# score / report

def _score_pair(ref_path: str, hyp_path: str) -> scoring.DerBreakdown:
    ref = audio_io.parse_rttm_file(ref_path)
    hyp = audio_io.parse_rttm_file(hyp_path)
    shared = max(ref.duration, hyp.duration)
    return scoring.der(ref.with_duration(shared), hyp.with_duration(shared))


def _collect_pairs(ref: str, hyp: str) -> list[tuple[str, str, str]]:
    ref_p, hyp_p = Path(ref), Path(hyp)
    if ref_p.is_dir() != hyp_p.is_dir():
        raise UsageError("ref and hyp must both be files or both be directories")
    if ref_p.is_dir():
        pairs = []
        for r in sorted(ref_p.glob("*.rttm")):
            h = hyp_p / r.name
            if not h.exists():
                raise UsageError(f"missing hypothesis for {r.name}")
            pairs.append((r.stem, str(r), str(h)))
        if not pairs:
            raise UsageError(f"no rttm files in {ref_p}")
        return pairs
    return [(ref_p.stem, str(ref_p), str(hyp_p))]


def cmd_score(args) -> int:
    datasets: list[tuple[str, list[tuple[str, str, str]]]] = []
    if args.set:
        for spec_str in args.set:
            try:
                name, ref, hyp = spec_str.split(":", 2)
            except ValueError:
                raise UsageError(f"--set expects NAME:REF:HYP, got {spec_str!r}")
            datasets.append((name, _collect_pairs(ref, hyp)))
    else:
        if not (args.ref and args.hyp):
            raise UsageError("score needs REF and HYP (or --set entries)")
        datasets.append((args.name, _collect_pairs(args.ref, args.hyp)))

    def score_one(item):
        return _score_pair(item[1], item[2])

    per_dataset = []
    file_rows = []
    for name, pairs in datasets:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_score_pair, [p[1] for p in pairs],
                                        [p[2] for p in pairs]))
        else:
            results = [score_one(p) for p in pairs]
        for (fid, _, _), b in zip(pairs, results):
            file_rows.append((f"{name}/{fid}", b))
        per_dataset.append((name, scoring.pool(results)))
    macro = scoring.macro_average([b for _, b in per_dataset])
    table = scoring.render_table(per_dataset, macro)
    csv_text = scoring.render_csv(file_rows + per_dataset, macro)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(table)
    (out / "report.csv").write_text(csv_text)
    write_manifest(out / "manifest.yaml", "score",
                   {"datasets": [(n, [p[0] for p in ps]) for n, ps in datasets]},
                   inputs=[p for _, ps in datasets for _, r, h in ps for p in (r, h)],
                   outputs=[str(out / "report.txt"), str(out / "report.csv")])
    print(table, end="")
    return 0


def cmd_report(args) -> int:
    rows = []
    for csv_path in args.csv:
        for line in Path(csv_path).read_text().splitlines()[1:]:
            cells = line.split(",")
            if cells[0] == "Macro" or "/" in cells[0]:
                continue
            b = scoring.DerBreakdown(
                der_overall=float(cells[1]), der_overlap=float(cells[2]),
                der_single=float(cells[3]), miss=float(cells[4]),
                false_alarm=float(cells[5]), confusion=float(cells[6]),
                total_ref_speech=float(cells[7]),
            )
            rows.append((cells[0], b))
    if not rows:
        raise UsageError("no dataset rows found in the given csv files")
    macro = scoring.macro_average([b for _, b in rows])
    table = scoring.render_table(rows, macro)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
    print(table, end="")
    return 0


# ----------------------------------------------------------------------

def _show_config(kind: str) -> int:
    if kind == "simulate":
        payload = {"num_files": 1, "stem": "meeting", "spectrally_identical_pair": False,
                   **SimConfig().to_dict()}
    else:
        payload = {"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict(),
                   "target": "eend", "input_kinds": "all",
                   "channel_count": None, "channel_selection": "per_session"}
    print(yaml.safe_dump(payload, sort_keys=True), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialdiar",
                                     description="Spatially conditioned speaker diarization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic multi-channel meetings")
    p.add_argument("--config", required=False, help="simulation yaml")
    p.add_argument("--out", required=False, help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--show-config", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train a diarization model")
    p.add_argument("--config", required=False, help="model+train yaml")
    p.add_argument("--data", help=f"data directory (default ${DATA_DIR_ENV})")
    p.add_argument("--out", required=False, help="run output directory")
    p.add_argument("--aux", help="pretrained auxiliary checkpoint (frozen_aux stage)")
    p.add_argument("--init", help="checkpoint to resume from (joint_finetune stage)")
    p.add_argument("--show-config", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run segment inference and oracle stitching")
    p.add_argument("checkpoint")
    p.add_argument("wav")
    p.add_argument("ref", help="reference rttm (oracle stitching input)")
    p.add_argument("out", help="hypothesis rttm path")
    p.add_argument("--sanity-ref", action="store_true",
                   help="debug: emit the reference as the hypothesis")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("score", help="collar-free DER with OV/Single split")
    p.add_argument("ref", nargs="?")
    p.add_argument("hyp", nargs="?")
    p.add_argument("--name", default="dataset")
    p.add_argument("--set", action="append",
                   help="NAME:REF_DIR:HYP_DIR (repeatable, enables macro rows)")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("report", help="merge score csv files into a macro table")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "show_config", False):
            return _show_config(args.command)
        if args.command in ("simulate", "train"):
            if not args.config or not args.out:
                raise UsageError(f"{args.command} requires --config and --out")
        return args.fn(args)
    except (UsageError, audio_io.FormatError, audio_io.RttmParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
