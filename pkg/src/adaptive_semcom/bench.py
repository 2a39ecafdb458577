"""Metrics, SNR sweeps, reports and baselines."""

from __future__ import annotations

import csv
import io
import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import channel as ch
from . import fec
from .link import RateReport, SemComSystem, Streams, cpp_user, read_traces, run_frames, write_traces

PSNR_CAP = 100.0
DEFAULT_GRID = (0, 5, 10, 15, 20, 25)


def psnr(x, x_hat) -> float:
    """PSNR in dB of images given on the [0, 1] scale, measured on 0..255.
    Identical images give the 100 dB cap."""
    x = np.asarray(x, dtype=np.float64) * 255.0
    x_hat = np.asarray(x_hat, dtype=np.float64) * 255.0
    if x.shape != x_hat.shape:
        raise ValueError("shape mismatch")
    mse = np.mean((x - x_hat) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10 * math.log10(255.0 ** 2 / mse), PSNR_CAP))


def cpp(S, height: int = 32, width: int = 32):
    """Channel usage per pixel for S real-valued channel symbols."""
    return S / (2 * height * width)


__all__ = ["psnr", "cpp", "cpp_user", "SweepRow", "SweepReport", "sweep", "report_from_traces",
           "baseline_fixed_rate", "baseline_bpg", "plot_reports"]


# -- reports --------------------------------------------------------------------

COLUMNS = ("snr_db", "csi_mode", "users", "antennas", "frames", "mean_c_hat", "std_c_hat",
           "mean_length_ratio_pct", "mean_cpp", "std_cpp", "mean_psnr", "std_psnr", "degraded_frac")


@dataclass
class SweepRow:
    snr_db: float
    csi_mode: str
    users: int
    antennas: int
    frames: int
    mean_c_hat: float
    std_c_hat: float
    mean_length_ratio_pct: float
    mean_cpp: float
    std_cpp: float
    mean_psnr: float
    std_psnr: float
    degraded_frac: float


@dataclass
class SweepReport:
    rows: list[SweepRow]
    fingerprint: dict = field(default_factory=dict)

    def row(self, snr_db) -> SweepRow:
        for r in self.rows:
            if r.snr_db == snr_db:
                return r
        raise KeyError(snr_db)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.fingerprint):
            buf.write(f"# {key}={self.fingerprint[key]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "SweepReport":
        lines = text.splitlines()
        fp = dict(line[2:].split("=", 1) for line in lines if line.startswith("# "))
        body = [line for line in lines if not line.startswith("#")]
        rows = []
        for rec in csv.DictReader(body):
            vals = {c: (rec[c] if c == "csi_mode" else int(rec[c]) if c in ("users", "antennas", "frames")
                        else float(rec[c])) for c in COLUMNS}
            rows.append(SweepRow(**vals))
        return cls(rows, fp)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _summarize(snr_db, csi_mode, users, antennas, recs) -> SweepRow:
    """Means over users and frames. ``recs`` are RateReport objects or trace dicts."""
    get = (lambda r, k: r[k]) if recs and isinstance(recs[0], dict) else getattr
    c = np.array([get(r, "c_hat") for r in recs], dtype=np.float64)
    lr = np.array([get(r, "length_ratio") for r in recs], dtype=np.float64)
    cp = np.array([get(r, "cpp") for r in recs], dtype=np.float64)
    ps = np.array([get(r, "psnr") for r in recs], dtype=np.float64)
    dg = np.array([get(r, "degraded") for r in recs], dtype=np.float64)
    sent = c > 0
    return SweepRow(float(snr_db), csi_mode, users, antennas, len(recs) // users,
                    float(c.mean()), float(c.std()),
                    float(100 * lr[sent].mean()) if sent.any() else 0.0,
                    float(cp.mean()), float(cp.std()), float(ps.mean()), float(ps.std()), float(dg.mean()))


def report_from_traces(traces: list[dict], fingerprint: dict | None = None) -> SweepReport:
    """Rebuild a report from JSON-lines frame traces."""
    rows = []
    keys = []
    for t in traces:
        key = (t["snr_db"], t["csi_mode"], t["users"], t["antennas"])
        if key not in keys:
            keys.append(key)
    for key in keys:
        recs = [t for t in traces if (t["snr_db"], t["csi_mode"], t["users"], t["antennas"]) == key]
        rows.append(_summarize(*key, recs))
    return SweepReport(rows, dict(fingerprint or {}))


# -- sweeps ---------------------------------------------------------------------

def _frames(images, users):
    images = torch.as_tensor(np.asarray(images))
    n = (len(images) // users) * users
    if n == 0:
        raise ValueError(f"need at least {users} images")
    return images[:n].reshape(n // users, users, *images.shape[1:])


def sweep(system: SemComSystem, images, snr_grid=DEFAULT_GRID, csi_mode: str = "perfect", seed: int = 0,
          frames_per_batch: int = 128, policy: str = "sample", trace_stream=None,
          fingerprint: dict | None = None, **frame_kwargs) -> SweepReport:
    """Evaluate the evaluation frame pipeline over an SNR grid.

    ``images`` is an (N, 3, 32, 32) array in [0, 1]; consecutive groups of K
    images form one frame. Grid point i uses random streams seeded by
    (seed, i), so different CSI modes see the same channel realizations.
    """
    cfg = system.cfg
    frames = _frames(images, cfg.users).to(next(system.parameters()).dtype)
    system.eval()
    rows = []
    for i, snr in enumerate(snr_grid):
        streams = Streams(seed * 1000 + i)
        recs = []
        for start in range(0, len(frames), frames_per_batch):
            chunk = frames[start:start + frames_per_batch]
            snr_t = torch.full((len(chunk),), float(snr), dtype=torch.float64)
            _, reps = run_frames(system, chunk, snr_t, streams, csi_mode=csi_mode, policy=policy,
                                 frame_offset=start, **frame_kwargs)
            recs.extend(reps)
        if trace_stream is not None:
            for r in recs:
                trace_stream.write(_trace_line(r, csi_mode, cfg.users, cfg.antennas) + "\n")
        rows.append(_summarize(snr, csi_mode, cfg.users, cfg.antennas, recs))
    fp = {"toggles": cfg.fingerprint(), "policy": policy, "seed": seed}
    fp.update(fingerprint or {})
    return SweepReport(rows, fp)


def _trace_line(r: RateReport, csi_mode, users, antennas) -> str:
    import json
    d = json.loads(r.to_json())
    d.update(csi_mode=csi_mode, users=users, antennas=antennas)
    return json.dumps(d, sort_keys=True)


def baseline_fixed_rate(system: SemComSystem, images, snr_grid=DEFAULT_GRID, **kw) -> SweepReport:
    """Fixed-rate deep JSCC baseline: a model built with ``fixed_maps`` and
    pruning disabled, evaluated on the same grid."""
    cfg = system.cfg
    if cfg.fixed_maps is None or cfg.pruning:
        raise ValueError("fixed-rate baseline needs fixed_maps set and pruning disabled")
    return sweep(system, images, snr_grid, **kw)


# -- separated source/channel coding baseline ---------------------------------

class ImageCodec:
    """Interface of a pluggable image compressor."""
    name = "codec"

    def available(self) -> bool:
        return True

    def encode(self, img: np.ndarray, q: int) -> bytes:
        raise NotImplementedError

    def decode(self, data: bytes, shape) -> np.ndarray:
        raise NotImplementedError


class BpgCodec(ImageCodec):
    """Calls ``bpgenc -q Q -o out.bpg in.png`` and ``bpgdec -o out.png in.bpg``."""
    name = "bpg"

    def __init__(self, enc: str = "bpgenc", dec: str = "bpgdec"):
        self.enc, self.dec = enc, dec

    def available(self) -> bool:
        return shutil.which(self.enc) is not None and shutil.which(self.dec) is not None

    def encode(self, img, q):
        from PIL import Image
        with tempfile.TemporaryDirectory() as d:
            src, out = Path(d) / "in.png", Path(d) / "out.bpg"
            Image.fromarray(img).save(src)
            subprocess.run([self.enc, "-q", str(q), "-o", str(out), str(src)], check=True, capture_output=True)
            return out.read_bytes()

    def decode(self, data, shape):
        from PIL import Image
        with tempfile.TemporaryDirectory() as d:
            src, out = Path(d) / "in.bpg", Path(d) / "out.png"
            src.write_bytes(data)
            subprocess.run([self.dec, "-o", str(out), str(src)], check=True, capture_output=True)
            return np.asarray(Image.open(out).convert("RGB"))


class JpegCodec(ImageCodec):
    """Pillow JPEG, a stand-in when the BPG tools are absent. ``q`` follows
    the BPG convention (higher = coarser) by mapping to quality 100 - 2q."""
    name = "jpeg"

    def encode(self, img, q):
        from PIL import Image
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format="JPEG", quality=int(np.clip(100 - 2 * q, 1, 95)))
        return buf.getvalue()

    def decode(self, data, shape):
        from PIL import Image
        return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def _bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def baseline_bpg(images, q: int, snr_grid=DEFAULT_GRID, codec: ImageCodec | None = None, users: int = 2,
                 antennas: int = 2, seed: int = 0, noiseless: bool = False) -> SweepReport | None:
    """Compressor + rate-1/2 LDPC + 4-QAM over the MU-MIMO channel with
    L-MMSE detection. Frames with any failing block are scored at the PSNR of
    the mean image. Returns None (with a notice) when the codec is missing."""
    codec = codec or BpgCodec()
    if not codec.available():
        print(f"baseline_bpg: {codec.name} tools unavailable, skipped")
        return None
    code = fec.baseline_code()
    frames = _frames(images, users).numpy()
    mean_img = frames.reshape(-1, *frames.shape[2:]).mean(0)
    rows = []
    for i, snr in enumerate(snr_grid):
        streams = Streams(seed * 1000 + i)
        recs = []
        for f, frame in enumerate(frames):
            streams_H = ch.sample_channel(antennas, users, streams.channel, (), torch.complex128)
            payloads, syms = [], []
            for img in frame:
                u8 = np.clip(np.rint(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
                data = codec.encode(u8, q)
                bits = _bits(data)
                nblk = -(-bits.size // code.k)
                info = np.zeros((nblk, code.k), dtype=np.uint8)
                info.ravel()[: bits.size] = bits
                cw = code.encode(info)
                payloads.append((data, info, bits.size))
                syms.append(fec.qam_map(cw.ravel(), 4))
            L = max(s.size for s in syms)
            Z = np.zeros((L, users), dtype=complex)
            for k, s in enumerate(syms):
                Z[: s.size, k] = s
            nv = torch.zeros(()) if noiseless else ch.noise_var_for_snr(streams_H, torch.tensor(float(snr)))
            Y = ch.transmit(torch.as_tensor(Z), streams_H, nv, streams.noise)
            W = ch.lmmse_filter(streams_H, nv)
            g = torch.diagonal(W @ streams_H)
            _, inn = ch.post_detection_stats(W, streams_H, nv)
            S_hat = ((W @ Y) / g.unsqueeze(-1)).numpy()
            post_nv = (inn / g.abs() ** 2).numpy()
            for k, (data, info, nbits) in enumerate(payloads):
                n_sym = syms[k].size
                llr = fec.qam_demap(S_hat[k, :n_sym], max(float(post_nv[k]), 1e-12), 4).reshape(len(info), -1)
                dec, ok, _ = code.decode(llr)
                img = frame[k]
                score = None
                if ok.all() and np.array_equal(dec, info):
                    try:
                        rec = codec.decode(np.packbits(dec.ravel()[:nbits]).tobytes(), img.shape)
                        score = psnr(img, rec.transpose(2, 0, 1) / 255.0)
                    except Exception:
                        score = None
                failed = score is None
                if failed:
                    score = psnr(img, mean_img)
                S = 2 * n_sym
                recs.append(dict(c_hat=0, length_ratio=0.0, cpp=cpp(S), psnr=score, degraded=failed))
        row = _summarize(snr, "perfect", users, antennas, recs)
        rows.append(row)
    return SweepReport(rows, {"baseline": f"{codec.name}+ldpc1/2+4qam", "q": q, "seed": seed})


# -- plots ------------------------------------------------------------------------

def plot_reports(reports: dict[str, SweepReport], path, title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for label, rep in reports.items():
        snr = rep.column("snr_db")
        a1.plot(snr, rep.column("mean_psnr"), marker="o", label=label)
        a2.plot(snr, rep.column("mean_cpp"), marker="s", label=label)
    a1.set_xlabel("SNR (dB)")
    a1.set_ylabel("PSNR (dB)")
    a2.set_xlabel("SNR (dB)")
    a2.set_ylabel("CPP")
    a1.legend(fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def traces_to_report(path, fingerprint=None) -> SweepReport:
    with open(path) as fh:
        return report_from_traces(read_traces(fh), fingerprint)


__all__ += ["ImageCodec", "BpgCodec", "JpegCodec", "traces_to_report", "write_traces"]
