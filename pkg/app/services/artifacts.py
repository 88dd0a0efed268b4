"""
Артефакты запусков: буферизованная атомарная запись, PNG с сайдкарами,
тензоры энкодеров, чекпоинты бандла и проекции.
"""

import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from app.errors import DataError, FormatError
from app.services.diffusion import DiffusionBundle, make_schedule
from app.services.encoder_bench import EncoderOutput
from app.services.evaluation import GeneratedImage
from app.services.ingestion import load_png
from app.services.projection import PARAM_ORDER, ProjectionMLP
from app.services.toy_models import ToyDenoiser, ToyTextEncoder, ToyVAE

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "toy-bundle"
BUNDLE_VERSION = 1
PNG_SOFTWARE = "cxr-workbench"


class ArtifactWriter:
    """
    Копит артефакты в памяти; commit() пишет каждый во временный файл
    рядом с целью и переименовывает. До commit() на диске ничего нет.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self._files: Dict[str, bytes] = {}

    def __len__(self) -> int:
        return len(self._files)

    @property
    def names(self) -> List[str]:
        return sorted(self._files)

    def add_bytes(self, name: str, data: bytes) -> None:
        self._files[name] = data

    def add_text(self, name: str, text: str) -> None:
        self.add_bytes(name, text.encode("utf-8"))

    def add_json(self, name: str, obj: Any) -> None:
        self.add_text(name, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")

    def add_csv(self, name: str, frame: pd.DataFrame, index: bool = False) -> None:
        self.add_text(name, frame.to_csv(index=index, lineterminator="\n"))

    def add_png(self, name: str, pixels: np.ndarray, bits: int = 8) -> None:
        self.add_bytes(name, png_bytes(pixels, bits))

    def commit(self) -> List[Path]:
        written = []
        for name in sorted(self._files):
            target = self.root / name
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(self._files[name])
                os.replace(tmp, target)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
            written.append(target)
        logger.info(f"Committed {len(written)} artifacts to {self.root}")
        self._files.clear()
        return written


def png_bytes(pixels: np.ndarray, bits: int = 8) -> bytes:
    """PNG в оттенках серого с фиксированными метаданными."""
    grid = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        img = Image.fromarray(np.round(grid * 255.0).astype(np.uint8))
    elif bits == 16:
        img = Image.fromarray(np.round(grid * 65535.0).astype(np.uint16))
    else:
        raise DataError(f"PNG bit depth must be 8 or 16, got {bits}")
    info = PngInfo()
    info.add_text("Software", PNG_SOFTWARE)
    buffer = io.BytesIO()
    img.save(buffer, format="PNG", pnginfo=info)
    return buffer.getvalue()


# --- Сгенерированные снимки ---

def add_generated(writer: ArtifactWriter, images: Sequence[GeneratedImage], prefix: str = "images") -> None:
    records = []
    for item in images:
        stem = f"{prefix}/{item.sample.id}"
        writer.add_png(f"{stem}.png", item.sample.pixels)
        sidecar = item.sidecar()
        sidecar["labels"] = None
        writer.add_json(f"{stem}.json", sidecar)
        records.append(f"{item.sample.id}.png")
    writer.add_json(f"{prefix}/manifest.json", {"kind": "images", "records": records})


def load_generated(manifest: Union[str, Path]) -> List[GeneratedImage]:
    """Сгенерированные снимки с подписями и ожидаемыми метками из сайдкаров."""
    manifest = Path(manifest)
    try:
        data = json.loads(manifest.read_text(encoding="utf-8"))
        records = data["records"]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f"Invalid manifest: {e}", locus=str(manifest)) from e

    items = []
    for record in records:
        png = manifest.parent / record
        sidecar = png.with_suffix(".json")
        try:
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
            items.append(GeneratedImage(
                sample=load_png(png),
                caption=meta["caption"],
                expected_label=int(meta["expected_label"]),
                seed=int(meta["seed"]),
                steps=int(meta["steps"]),
                mode=meta["mode"],
            ))
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise FormatError(f"Invalid generated-image sidecar: {e}", locus=str(sidecar)) from e
    return items


# --- Тензоры энкодеров ---

def encoder_tensor_files(ids: Sequence[str], outputs: Sequence[EncoderOutput]) -> Tuple[bytes, bytes]:
    """(index.jsonl, payload.bin): строки индекса со смещениями в байтах, float32 LE."""
    lines, chunks, offset = [], [], 0

    def _put(array: np.ndarray) -> int:
        nonlocal offset
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        start = offset
        chunks.append(data)
        offset += len(data)
        return start

    for report_id, out in zip(ids, outputs):
        record = {
            "id": report_id,
            "encoder_id": out.encoder_id,
            "tokens": int(out.token_states.shape[0]),
            "dim": out.dim,
            "offset": _put(out.token_states),
            "pooled_offset": None if out.pooled is None else _put(out.pooled),
            "model_specific_offset": None if out.model_specific is None else _put(out.model_specific),
        }
        lines.append(json.dumps(record, sort_keys=True))
    return ("\n".join(lines) + "\n").encode("utf-8"), b"".join(chunks)


def write_encoder_tensors(directory: Union[str, Path], ids: Sequence[str],
                          outputs: Sequence[EncoderOutput]) -> Path:
    writer = ArtifactWriter(directory)
    index, payload = encoder_tensor_files(ids, outputs)
    writer.add_bytes("index.jsonl", index)
    writer.add_bytes("payload.bin", payload)
    writer.commit()
    return Path(directory)


def read_encoder_tensors(directory: Union[str, Path]) -> Dict[str, EncoderOutput]:
    """report id -> EncoderOutput из каталога index.jsonl + payload.bin."""
    directory = Path(directory)
    try:
        payload = np.fromfile(directory / "payload.bin", dtype="<f4")
        lines = (directory / "index.jsonl").read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise FormatError(f"Unreadable encoder tensors: {e}", locus=str(directory)) from e

    def _take(byte_offset: Optional[int], count: int, locus: str) -> Optional[np.ndarray]:
        if byte_offset is None:
            return None
        start = byte_offset // 4
        if byte_offset % 4 or start + count > payload.size:
            raise FormatError("Offset outside payload", locus=locus)
        return payload[start:start + count].astype(np.float64)

    outputs = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        locus = f"{directory / 'index.jsonl'}:{lineno}"
        try:
            rec = json.loads(line)
            tokens, dim = int(rec["tokens"]), int(rec["dim"])
            states = _take(int(rec["offset"]), tokens * dim, locus).reshape(tokens, dim)
            outputs[str(rec["id"])] = EncoderOutput(
                token_states=states,
                pooled=_take(rec.get("pooled_offset"), dim, locus),
                model_specific=_take(rec.get("model_specific_offset"), dim, locus),
                encoder_id=str(rec.get("encoder_id", "")),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"Invalid index record: {e}", locus=locus) from e
    return outputs


# --- Чекпоинты ---

def _layout(params: Mapping[str, np.ndarray], names: Sequence[str]) -> Tuple[List[Dict], bytes]:
    layout, chunks, offset = [], [], 0
    for name in names:
        data = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        layout.append({"name": name, "shape": list(params[name].shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    return layout, b"".join(chunks)


def _unpack(payload: np.ndarray, layout: Sequence[Dict], locus: str) -> Dict[str, np.ndarray]:
    params = {}
    for entry in layout:
        shape = tuple(entry["shape"])
        start = entry["offset"] // 4
        count = int(np.prod(shape)) if shape else 1
        if start + count > payload.size:
            raise FormatError(f"Parameter {entry['name']} exceeds payload", locus=locus)
        params[entry["name"]] = payload[start:start + count].astype(np.float64).reshape(shape)
    return params


def add_bundle(writer: ArtifactWriter, bundle: DiffusionBundle, prefix: str = "bundle",
               provenance: Optional[Dict[str, Any]] = None) -> None:
    """Бандл: bundle.json (компоненты, формы, расписание, токены) + <component>.bin."""
    if not isinstance(bundle.denoiser, ToyDenoiser):
        raise DataError("Only toy bundles can be checkpointed")
    components = {}
    for component, obj in (("vae", bundle.vae), ("text", bundle.text), ("denoiser", bundle.denoiser)):
        params = obj.parameters()
        layout, payload = _layout(params, sorted(params))
        writer.add_bytes(f"{prefix}/{component}.bin", payload)
        components[component] = {"file": f"{component}.bin", "params": layout}

    writer.add_json(f"{prefix}/bundle.json", {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "seed": bundle.seed,
        "image_size": bundle.image_size,
        "schedule": bundle.schedule.to_dict(),
        "latent_shape": list(bundle.denoiser.latent_shape),
        "prior_std": bundle.denoiser.prior_std,
        "vocab_buckets": bundle.text.buckets,
        "registered_tokens": dict(sorted(bundle.text.registered.items())),
        "components": components,
    })
    if provenance is not None:
        writer.add_json(f"{prefix}/provenance.json", provenance)


def load_bundle(directory: Union[str, Path]) -> DiffusionBundle:
    directory = Path(directory)
    locus = str(directory / "bundle.json")
    try:
        header = json.loads((directory / "bundle.json").read_text(encoding="utf-8"))
        if header.get("format") != BUNDLE_FORMAT or header.get("version") != BUNDLE_VERSION:
            raise FormatError("Unsupported bundle format", locus=locus)
        params = {}
        for component, entry in header["components"].items():
            payload = np.fromfile(directory / entry["file"], dtype="<f4")
            params[component] = _unpack(payload, entry["params"], locus)
        schedule = make_schedule(header["schedule"]["T"], header["schedule"]["beta_start"],
                                 header["schedule"]["beta_end"])
        vae = ToyVAE(params["vae"]["basis"], params["vae"]["mean_patch"], params["vae"]["scale"])
        text = ToyTextEncoder(params["text"]["embedding"], int(header["vocab_buckets"]),
                              header.get("registered_tokens", {}))
        denoiser = ToyDenoiser(params["denoiser"], tuple(header["latent_shape"]),
                               schedule.alpha_bars, float(header["prior_std"]))
    except OSError as e:
        raise FormatError(f"Unreadable bundle: {e}", locus=locus) from e
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Invalid bundle header: {e}", locus=locus) from e

    logger.info(f"Loaded bundle from {directory}")
    return DiffusionBundle(vae=vae, text=text, denoiser=denoiser, schedule=schedule,
                           seed=int(header["seed"]), image_size=int(header["image_size"]))


def add_projection(writer: ArtifactWriter, mlp: ProjectionMLP, name: str = "projection") -> None:
    layout, payload = _layout(mlp.params, PARAM_ORDER)
    writer.add_bytes(f"{name}.bin", payload)
    writer.add_json(f"{name}.json", {
        "dims": mlp.dim,
        "hidden": mlp.hidden,
        "mode": mlp.mode,
        "seed": mlp.seed,
        "step": mlp.step,
        "layout": layout,
    })


def load_projection(header_path: Union[str, Path]) -> ProjectionMLP:
    header_path = Path(header_path)
    locus = str(header_path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        payload = np.fromfile(header_path.with_suffix(".bin"), dtype="<f4")
        params = _unpack(payload, header["layout"], locus)
        mlp = ProjectionMLP(params=params, mode=header["mode"], seed=int(header["seed"]),
                            step=int(header["step"]))
    except OSError as e:
        raise FormatError(f"Unreadable projection: {e}", locus=locus) from e
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Invalid projection header: {e}", locus=locus) from e
    if mlp.dim != header["dims"] or mlp.hidden != header["hidden"]:
        raise FormatError("Header dims do not match payload", locus=locus)
    return mlp


def loss_frame(losses: Sequence[float], **terms: Sequence[float]) -> pd.DataFrame:
    """Таблица step, loss и, если заданы, непустые слагаемые лосса по шагам."""
    frame = pd.DataFrame({"step": np.arange(1, len(losses) + 1), "loss": list(losses)})
    for name, values in terms.items():
        if len(values):
            frame[name] = list(values)
    return frame
