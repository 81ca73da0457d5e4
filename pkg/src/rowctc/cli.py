"""Command-line surface: dataset generation, training with curve logging,
evaluation, and baseline-vs-proposed comparison.

Verbs: gen-data, train, eval, compare. All outputs land under --out; inputs
are never mutated; identical inputs and seeds give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alphabet import LabelMapError, default_label_map, label_map_hash, load_label_map
from .ctc_core import CtcInfeasibleError
from .decode_metrics import (
    evaluate,
    greedy_decode,
    parse_eval_report,
    save_eval_report,
)
from .glyphforge import (
    DirectoryAtlas,
    GlyphMissingError,
    ManifestError,
    SyntheticAtlas,
    build_dataset,
    expected_counts,
    iterate_split,
    load_manifest,
    plan_writer_splits,
    random_words,
)
from .net import (
    CheckpointError,
    DivergenceError,
    Model,
    ModelConfig,
    init_model,
    load_checkpoint,
    sample_losses,
    save_checkpoint,
    train_step,
)

_WORDS_TAG = 523
_SHUFFLE_TAG = 619

CURVES_HEADER = "epoch,train_total,train_char,train_row,val_total,val_char,train_word_acc"

CONFIG_KEYS = ("mode", "epochs", "lr", "seed", "hidden_size", "conv_channels", "row_weight")


def _triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated counts, got {text!r}")
    try:
        a, b, c = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-integer count in {text!r}")
    return a, b, c


def _channels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad channel list {text!r}")


def parse_words_file(path) -> list[tuple[int, ...]]:
    """One word per line as whitespace-separated character ids; '#' comments."""
    words = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                words.append(tuple(int(tok) for tok in line.split()))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-integer char id in {line!r}") from exc
    if not words:
        raise ValueError(f"{path}: no words found")
    return words


def parse_config_file(path) -> dict[str, str]:
    """key = value lines; '#' comments; keys limited to the documented set."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = key.strip(), value.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r} (known: {CONFIG_KEYS})")
            out[key] = value
    return out


@dataclass
class RunConfig:
    data_dir: Path
    out_dir: Path
    mode: str = "proposed"
    epochs: int = 30
    lr: float = 0.01
    seed: int = 0
    hidden_size: int = 64
    conv_channels: tuple[int, ...] = (16, 32)
    row_weight: float = 1.0
    resume: Path | None = None

    def __post_init__(self):
        if self.mode not in ("baseline", "proposed"):
            raise ValueError(f"mode must be 'baseline' or 'proposed', got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


def _build_run_config(args) -> RunConfig:
    file_cfg = parse_config_file(args.config) if args.config else {}

    def pick(flag_value, key, convert, default):
        if flag_value is not None:
            return flag_value
        if key in file_cfg:
            return convert(file_cfg[key])
        return default

    mode = pick(args.mode, "mode", str, "proposed")
    if mode == "baseline" and args.row_weight is not None:
        raise ValueError("--row-weight is a row-head option; baseline mode forbids it")
    return RunConfig(
        data_dir=Path(args.data),
        out_dir=Path(args.out),
        mode=mode,
        epochs=pick(args.epochs, "epochs", int, 30),
        lr=pick(args.lr, "lr", float, 0.01),
        seed=pick(args.seed, "seed", int, 0),
        hidden_size=pick(args.hidden, "hidden_size", int, 64),
        conv_channels=pick(args.channels, "conv_channels", _channels, (16, 32)),
        row_weight=pick(args.row_weight, "row_weight", float, 1.0),
        resume=Path(args.resume) if args.resume else None,
    )


@contextmanager
def _training_lock(out_dir: Path):
    lock = out_dir / "train.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"lock file {lock} exists; another training run owns this output "
            "directory (remove the file if that run is dead)"
        )
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    label_map = load_label_map(args.label_map) if args.label_map else default_label_map()
    if args.words:
        words = parse_words_file(args.words)
        if args.word_split is None:
            raise ValueError("--words requires --word-split ntrain,nval,ntest")
        nt, nv, ns = args.word_split
        if len(words) < nt + nv + ns:
            raise ValueError(
                f"word file has {len(words)} words, --word-split needs {nt + nv + ns}"
            )
        words_by_split = {
            "train": words[:nt],
            "val": words[nt:nt + nv],
            "test": words[nt + nv:nt + nv + ns],
        }
    else:
        nt, nv, ns = args.random_words
        rng = np.random.default_rng([args.seed, _WORDS_TAG])
        pool = random_words(nt + nv + ns, label_map.num_chars, rng,
                            min_len=args.min_len, max_len=args.max_len)
        words_by_split = {
            "train": pool[:nt],
            "val": pool[nt:nt + nv],
            "test": pool[nt + nv:],
        }

    writers_by_split = plan_writer_splits(args.writers)
    if args.atlas:
        atlas = DirectoryAtlas(args.atlas, label_map)
    else:
        atlas = SyntheticAtlas(label_map, seed=args.seed)

    manifest = build_dataset(
        words_by_split, writers_by_split, atlas, args.out, seed=args.seed,
        min_len=args.min_len, max_len=args.max_len,
    )
    planned = expected_counts(
        tuple(len(words_by_split[s]) for s in ("train", "val", "test")), args.writers
    )
    for split in ("train", "val", "test"):
        got = len(manifest.splits[split])
        assert got == planned[split]
        print(f"{split}: {got} samples "
              f"({len(words_by_split[split])} words x {len(writers_by_split[split])} writers)")
    print(f"dataset written to {manifest.root}")
    return 0


# ---------------------------------------------------------------------------
# train


def _mean(values) -> float:
    return sum(values) / len(values)


def _fmt(x) -> str:
    return repr(float(x))


def cmd_train(args) -> int:
    run = _build_run_config(args)
    manifest = load_manifest(run.data_dir / "manifest.tsv")
    label_map = load_label_map(manifest.root / manifest.label_map_path)
    lm_hash = label_map_hash(label_map)
    if lm_hash != manifest.label_map_sha256:
        raise ManifestError(
            f"label map file hash {lm_hash[:12]}... does not match manifest "
            f"{manifest.label_map_sha256[:12]}..."
        )
    if run.mode == "proposed" and label_map.num_rows < 2:
        raise ValueError("proposed mode needs a label map with at least two row classes")

    train_samples = list(iterate_split(manifest, "train"))
    val_samples = list(iterate_split(manifest, "val"))

    run.out_dir.mkdir(parents=True, exist_ok=True)
    with _training_lock(run.out_dir):
        if run.resume:
            model = load_checkpoint(
                run.resume,
                expect_row_head=(run.mode == "proposed"),
                expect_label_map_sha256=lm_hash,
            )
        else:
            cfg = ModelConfig(
                num_chars=label_map.num_chars,
                num_rows=label_map.num_rows,
                row_head=(run.mode == "proposed"),
                conv_channels=run.conv_channels,
                hidden_size=run.hidden_size,
                seed=run.seed,
            )
            model = init_model(cfg, label_map_sha256=lm_hash)

        curves_path = run.out_dir / "curves.csv"
        if run.resume and curves_path.exists():
            with open(curves_path, "r", encoding="utf-8") as fh:
                epoch_base = max(0, sum(1 for _ in fh) - 1)
            curves = open(curves_path, "a", encoding="utf-8", newline="\n")
        else:
            epoch_base = 0
            curves = open(curves_path, "w", encoding="utf-8", newline="\n")
            curves.write(CURVES_HEADER + "\n")

        best_val = float("inf")
        try:
            for local_epoch in range(1, run.epochs + 1):
                epoch = epoch_base + local_epoch
                order = np.random.default_rng(
                    [run.seed, _SHUFFLE_TAG, epoch]
                ).permutation(len(train_samples))
                tot, ch, rw, acc = [], [], [], 0
                for i in order:
                    sample = train_samples[i]
                    res = train_step(model, sample, run.lr, row_weight=run.row_weight)
                    tot.append(res.total)
                    ch.append(res.char_loss)
                    if res.row_loss is not None:
                        rw.append(res.row_loss)
                    acc += int(greedy_decode(res.char_log_probs) == sample.chars)

                val_tot, val_ch = [], []
                for sample in val_samples:
                    vt, vc, _ = sample_losses(model, sample, row_weight=run.row_weight)
                    val_tot.append(vt)
                    val_ch.append(vc)
                val_total, val_char = _mean(val_tot), _mean(val_ch)

                row_cell = _fmt(_mean(rw)) if rw else ""
                word_acc = acc / len(train_samples)
                curves.write(
                    f"{epoch},{_fmt(_mean(tot))},{_fmt(_mean(ch))},{row_cell},"
                    f"{_fmt(val_total)},{_fmt(val_char)},{_fmt(word_acc)}\n"
                )
                curves.flush()
                print(
                    f"epoch {epoch}: train_total={_mean(tot):.4f} val_total={val_total:.4f} "
                    f"val_char={val_char:.4f} train_acc={word_acc:.3f}"
                )
                if val_total < best_val:
                    best_val = val_total
                    save_checkpoint(model, run.out_dir / "best.ckpt")
        finally:
            curves.close()
        save_checkpoint(model, run.out_dir / "last.ckpt")
        if run.epochs == 0 and not (run.out_dir / "best.ckpt").exists():
            save_checkpoint(model, run.out_dir / "best.ckpt")
    print(f"checkpoints and curves written to {run.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    manifest = load_manifest(Path(args.data) / "manifest.tsv")
    model = load_checkpoint(args.checkpoint,
                            expect_label_map_sha256=manifest.label_map_sha256)
    report = evaluate(model, manifest, args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "checkpoint": Path(args.checkpoint).name,
        "checkpoint_step": str(model.step),
        "split": args.split,
        "dataset_seed": str(manifest.seed),
        "mode": "proposed" if model.cfg.row_head else "baseline",
    }
    report_path = out_dir / f"eval_{args.split}.txt"
    save_eval_report(report, report_path, meta)
    print(f"{args.split}: WER {report.wer:.2f}%  CER {report.cer:.2f}%  "
          f"({report.num_words} words, {report.num_chars} chars)")
    print(f"report written to {report_path}")
    return 0


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    base_report, base_meta = parse_eval_report(args.baseline)
    prop_report, prop_meta = parse_eval_report(args.proposed)

    def row(label, report, meta):
        return (label, meta.get("checkpoint", "?"), meta.get("checkpoint_step", "?"),
                report.wer, report.cer)

    rows = [row("baseline", base_report, base_meta), row("proposed", prop_report, prop_meta)]
    d_wer = prop_report.wer - base_report.wer
    d_cer = prop_report.cer - base_report.cer

    text_lines = [
        f"{'model':<10} {'checkpoint':<18} {'step':>8} {'wer%':>9} {'cer%':>9}",
    ]
    for label, ckpt, step, wer, cer in rows:
        text_lines.append(f"{label:<10} {ckpt:<18} {step:>8} {wer:>9.2f} {cer:>9.2f}")
    text_lines.append(f"{'delta':<10} {'':<18} {'':>8} {d_wer:>+9.2f} {d_cer:>+9.2f}")
    table = "\n".join(text_lines) + "\n"

    csv_lines = ["model,checkpoint,checkpoint_step,wer,cer"]
    for label, ckpt, step, wer, cer in rows:
        csv_lines.append(f"{label},{ckpt},{step},{wer!r},{cer!r}")
    csv_lines.append(f"delta,,,{d_wer!r},{d_cer!r}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "compare.txt").write_text(table, encoding="utf-8")
    (out_dir / "compare.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rowctc",
        description="Multi-task CTC word-image recognition: dataset generation, "
                    "training, evaluation, comparison.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build a word-image dataset with writer-disjoint splits")
    p.add_argument("--words", help="word list file (one word per line, space-separated char ids)")
    p.add_argument("--word-split", type=_triple, default=None,
                   help="ntrain,nval,ntest words taken in order from --words")
    p.add_argument("--random-words", type=_triple, default=(300, 40, 40),
                   help="sample this many distinct random words per split (used without --words)")
    p.add_argument("--writers", type=_triple, default=(3, 1, 1),
                   help="train,val,test writer counts; ids are consecutive and disjoint")
    p.add_argument("--label-map", help="label map file (default: built-in 12-char/4-row map)")
    p.add_argument("--atlas", help="glyph directory <atlas>/<writer>/<char>.png "
                                   "(default: procedural synthetic glyphs)")
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a baseline or proposed model")
    p.add_argument("--data", required=True, help="dataset directory (contains manifest.tsv)")
    p.add_argument("--mode", choices=("baseline", "proposed"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None, help="recurrent hidden size")
    p.add_argument("--channels", type=_channels, default=None,
                   help="conv channel counts, e.g. 16,32")
    p.add_argument("--row-weight", type=float, default=None,
                   help="weight of the row-head loss (proposed mode only)")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a split and report WER/CER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="side-by-side WER/CER of two eval reports")
    p.add_argument("--baseline", required=True, help="baseline eval report")
    p.add_argument("--proposed", required=True, help="proposed eval report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, LookupError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
