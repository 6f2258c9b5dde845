"""Radiomics + image fusion at toy scale: project backbone embeddings into
image-embedding space, concatenate with encoder tokens, decode a tumor
probability mask; plus all segmentation metrics and the coverage-based cell
labeling rule.

The production-scale pretrained encoder/decoder pair is replaced by a small
learned patch encoder (or a frozen random-projection stub) behind a narrow
interface, so a real encoder can be slotted in later; the contribution under
test is the fusion wiring, not the vision foundation model.

SegSample serialization: one directory per sample holding 8-bit binary PGM
(P5) files -- ``patch.pgm`` (or ``patch_c{i}.pgm`` per channel),
``gt_mask.pgm``, ``cell_{i:03d}_mask.pgm`` -- plus ``cells.csv``
(cell_id + feature columns) and ``meta.txt`` (grid size and prompt vector).
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as L
from . import model as M
from .autodiff import Tensor, no_grad
from .blocks import ModelConfig, named_parameters
from .data import DataError
from .train import AdamW, TrainConfig

_PROMPT_RNG_SEED = 727  # the fixed stand-in for the text embedding


# -- radiomics projection (two-layer perceptron) -----------------------------------

@dataclass
class ProjectionParams:
    hidden: L.LinearParams  # [d_uam -> d_hidden]
    out: L.LinearParams     # [d_hidden -> d_img]


def projection_init(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> ProjectionParams:
    return ProjectionParams(hidden=L.linear_init(rng, d_in, d_hidden), out=L.linear_init(rng, d_hidden, d_out))


def project_radiomics(e_r: Tensor, p: ProjectionParams) -> Tensor:
    """Per-row MLP mapping pooled cell embeddings into image-embedding space."""
    return L.linear_forward(L.smooth_gelu(L.linear_forward(e_r, p.hidden)), p.out)


def fuse_embeddings(z_r: Tensor, z_m: Tensor) -> Tensor:
    """Concatenate along rows: radiomics rows first, image/prompt rows second."""
    if z_r.shape[-1] != z_m.shape[-1]:
        raise ad.ShapeError(f"fuse: embedding dims differ, {z_r.shape} vs {z_m.shape}")
    if z_r.shape[0] == 0:
        return z_m
    return ad.concat([z_r, z_m], axis=0)


# -- image encoders ------------------------------------------------------------------

def _patch_features(patch: np.ndarray, grid: int) -> np.ndarray:
    """Cut [H, W, C] into grid x grid tiles -> [P, tile*tile*C + 2] with the
    two trailing features holding the normalized tile-center coordinates."""
    H, W, C = patch.shape
    if H % grid or W % grid:
        raise ad.ShapeError(f"encoder grid {grid} does not tile patch {patch.shape}")
    th, tw = H // grid, W // grid
    tiles = patch.reshape(grid, th, grid, tw, C).transpose(0, 2, 1, 3, 4).reshape(grid * grid, th * tw * C)
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    coords = np.stack([(ii.ravel() + 0.5) / grid, (jj.ravel() + 0.5) / grid], axis=1)
    return np.concatenate([tiles, coords], axis=1)


@dataclass
class ToyConvEncoderParams:
    """Small learned patch encoder: tile pixels + coords -> d_img tokens."""
    l1: L.LinearParams
    l2: L.LinearParams
    grid: int


@dataclass
class FrozenStubParams:
    """Fixed random projection standing in for a pretrained encoder."""
    proj: L.LinearParams  # weights created with requires_grad=False
    grid: int


def toy_encoder_init(rng: np.random.Generator, grid: int, tile_hw: int, channels: int, d_img: int) -> ToyConvEncoderParams:
    d_in = tile_hw * tile_hw * channels + 2
    return ToyConvEncoderParams(
        l1=L.linear_init(rng, d_in, d_img), l2=L.linear_init(rng, d_img, d_img), grid=grid
    )


def frozen_stub_init(rng: np.random.Generator, grid: int, tile_hw: int, channels: int, d_img: int) -> FrozenStubParams:
    d_in = tile_hw * tile_hw * channels + 2
    w = Tensor(L.xavier_uniform(rng, d_in, d_img))  # not trainable
    return FrozenStubParams(proj=L.LinearParams(weight=w, bias=None), grid=grid)


def encode_patch(patch: np.ndarray, enc) -> Tensor:
    """Grid embedding [P, d_img] for a [H, W, C] patch; deterministic given weights."""
    feats = Tensor(_patch_features(np.asarray(patch, dtype=np.float64), enc.grid))
    if isinstance(enc, ToyConvEncoderParams):
        return L.linear_forward(L.smooth_gelu(L.linear_forward(feats, enc.l1)), enc.l2)
    return L.linear_forward(feats, enc.proj)


# -- mask decoder ---------------------------------------------------------------------

@dataclass
class DecoderParams:
    """Toy decoder: image-token rows, modulated by attention over the
    radiomics/prompt rows, mapped to per-tile logits and upsampled."""
    w_q: L.LinearParams
    w_k: L.LinearParams
    w_v: L.LinearParams
    mlp_hidden: L.LinearParams
    mlp_out: L.LinearParams  # [d_hidden -> 1]
    grid: int


def decoder_init(rng: np.random.Generator, d_img: int, d_hidden: int, grid: int) -> DecoderParams:
    return DecoderParams(
        w_q=L.linear_init(rng, d_img, d_img),
        w_k=L.linear_init(rng, d_img, d_img),
        w_v=L.linear_init(rng, d_img, d_img),
        mlp_hidden=L.linear_init(rng, d_img, d_hidden),
        mlp_out=L.linear_init(rng, d_hidden, 1),
        grid=grid,
    )


def _upsample_nearest(x: Tensor, factor_h: int, factor_w: int) -> Tensor:
    g1, g2 = x.shape
    x = ad.reshape(x, (g1, 1, g2, 1))
    x = ad.broadcast_to(x, (g1, factor_h, g2, factor_w))
    return ad.reshape(x, (g1 * factor_h, g2 * factor_w))


def decode_mask_logits(z_c: Tensor, dec: DecoderParams, n_radiomics: int, out_hw: tuple) -> Tensor:
    """Per-pixel tumor logits [H, W] from fused rows (radiomics rows first,
    then grid image tokens, then the prompt row)."""
    g = dec.grid
    P = g * g
    rows = z_c.shape[0]
    if rows < n_radiomics + P + 1:
        raise ad.ShapeError(f"decoder: {rows} fused rows inconsistent with grid {g} and L={n_radiomics}")
    d = z_c.shape[-1]
    pieces = ad.split(z_c, [n_radiomics, P, rows - n_radiomics - P], axis=0)
    ctx = pieces[1 + 1] if n_radiomics == 0 else ad.concat([pieces[0], pieces[2]], axis=0)
    img = pieces[1]
    q = ad.mul(L.linear_forward(img, dec.w_q), Tensor(1.0 / np.sqrt(d)))
    k = L.linear_forward(ctx, dec.w_k)
    v = L.linear_forward(ctx, dec.w_v)
    attn = ad.matmul(ad.softmax_last(ad.matmul(q, ad.swapaxes(k, -1, -2))), v)
    feat = ad.add(img, attn)
    h = L.smooth_gelu(L.linear_forward(feat, dec.mlp_hidden))
    logits = ad.reshape(L.linear_forward(h, dec.mlp_out), (g, g))
    H, W = out_hw
    return _upsample_nearest(logits, H // g, W // g)


def decode_mask(z_c: Tensor, dec: DecoderParams, n_radiomics: int, out_hw: tuple) -> Tensor:
    """Probability map [H, W] in [0, 1] (sigmoid of the decoder logits)."""
    return ad.sigmoid(decode_mask_logits(z_c, dec, n_radiomics, out_hw))


# -- segmentation metrics ----------------------------------------------------------------

SEG_THRESHOLD = 0.5


@dataclass
class SegMetrics:
    precision: float
    c_iou: float
    m_iou: float
    c_dice: float
    m_dice: float


def _iou(inter: int, union: int) -> float:
    # empty union: 1 when both masks empty, else 0
    return inter / union if union else 1.0


def _dice(inter: int, size_sum: int) -> float:
    return 2.0 * inter / size_sum if size_sum else 1.0


def segmentation_metrics(pred: np.ndarray, gt_mask: np.ndarray) -> SegMetrics:
    """Binarize the prediction at 0.5 (strictly greater) and compute pixel
    precision, tumor-class IoU/DICE (cIoU/cDICE), and the two-class means
    (mIoU/mDICE) with background as the second class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"segmentation_metrics: shapes {pred.shape} vs {gt.shape}")
    p = pred > SEG_THRESHOLD if pred.dtype != bool else pred

    tp = int(np.count_nonzero(p & gt))
    fp = int(np.count_nonzero(p & ~gt))
    fn = int(np.count_nonzero(~p & gt))
    tn = p.size - tp - fp - fn

    c_iou = _iou(tp, tp + fp + fn)
    bg_iou = _iou(tn, tn + fp + fn)
    c_dice = _dice(tp, 2 * tp + fp + fn)
    bg_dice = _dice(tn, 2 * tn + fp + fn)
    # precision on empty predictions: vacuous 1.0 only when gt is empty too
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    return SegMetrics(
        precision=precision,
        c_iou=c_iou,
        m_iou=(c_iou + bg_iou) / 2.0,
        c_dice=c_dice,
        m_dice=(c_dice + bg_dice) / 2.0,
    )


def cell_label_from_segmentation(cell_mask: np.ndarray, tumor_mask: np.ndarray) -> bool:
    """Tumor iff strictly more than 50% of the cell's pixels are covered."""
    cell = np.asarray(cell_mask).astype(bool)
    tumor = np.asarray(tumor_mask).astype(bool)
    if cell.shape != tumor.shape:
        raise ad.ShapeError(f"cell_label: shapes {cell.shape} vs {tumor.shape}")
    size = int(cell.sum())
    if size == 0:
        warnings.warn("empty cell mask; labeling non-tumor")
        return False
    return int((cell & tumor).sum()) / size > 0.5


# -- synthetic segmentation task -------------------------------------------------------

@dataclass
class SegSample:
    patch: np.ndarray        # [H, W, C] intensities in [0, 1], 8-bit quantized
    cell_masks: list         # pairwise-disjoint binary [H, W]
    cell_features: np.ndarray  # [L, F]
    gt_mask: np.ndarray      # binary [H, W]
    prompt_stub: np.ndarray  # fixed vector


def prompt_stub(dim: int = 8) -> np.ndarray:
    return np.random.default_rng(_PROMPT_RNG_SEED).standard_normal(dim)


def synthesize_seg_samples(
    n_samples: int,
    seed: int = 0,
    grid: int = 4,
    tile: int = 8,
    n_features: int = 8,
    noise: float = 0.08,
) -> list:
    """Toy task where the tumor region is recoverable only by combining both
    modalities: each grid tile is one cell; the image shows a brightness bit
    ``a`` per tile, the cell features carry an independent bit ``b`` (plus
    the tile-center coordinates and Gaussian distractors), and the ground
    truth tumor region is the union of tiles with a AND b."""
    if n_features < 3:
        raise DataError("segmentation synthesis needs >= 3 features (2 coords + signal)")
    rng = np.random.default_rng(seed)
    H = W = grid * tile
    stub = prompt_stub()
    samples = []
    for _ in range(n_samples):
        a = rng.integers(0, 2, size=(grid, grid))
        b = rng.integers(0, 2, size=(grid, grid))
        base = np.where(a == 1, 0.7, 0.3)
        patch = np.repeat(np.repeat(base, tile, axis=0), tile, axis=1)
        patch = patch + rng.uniform(-noise, noise, size=(H, W))
        patch = np.clip(np.round(patch * 255.0), 0, 255) / 255.0
        patch = patch[:, :, None]

        masks, feats = [], []
        gt = np.zeros((H, W), dtype=bool)
        for i in range(grid):
            for j in range(grid):
                mask = np.zeros((H, W), dtype=bool)
                mask[i * tile : (i + 1) * tile, j * tile : (j + 1) * tile] = True
                masks.append(mask)
                if a[i, j] and b[i, j]:
                    gt |= mask
                row = np.zeros(n_features)
                row[0] = (i + 0.5) / grid
                row[1] = (j + 0.5) / grid
                row[2] = (2.0 * b[i, j] - 1.0) + rng.normal(0.0, 0.15)
                row[3:] = rng.standard_normal(n_features - 3)
                feats.append(row)
        samples.append(
            SegSample(
                patch=patch,
                cell_masks=masks,
                cell_features=np.stack(feats),
                gt_mask=gt,
                prompt_stub=stub.copy(),
            )
        )
    return samples


# -- PGM serialization --------------------------------------------------------------------

def save_pgm(path, gray01: np.ndarray) -> None:
    """8-bit binary PGM (P5) from intensities in [0, 1]."""
    arr = np.clip(np.round(np.asarray(gray01) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise DataError(f"{path}: expected 8-bit binary PGM (P5)")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after maxval
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return arr / 255.0


def save_seg_sample(dirpath, sample: SegSample) -> None:
    os.makedirs(dirpath, exist_ok=True)
    C = sample.patch.shape[2]
    if C == 1:
        save_pgm(os.path.join(dirpath, "patch.pgm"), sample.patch[:, :, 0])
    else:
        for c in range(C):
            save_pgm(os.path.join(dirpath, f"patch_c{c}.pgm"), sample.patch[:, :, c])
    save_pgm(os.path.join(dirpath, "gt_mask.pgm"), sample.gt_mask.astype(float))
    for i, mask in enumerate(sample.cell_masks):
        save_pgm(os.path.join(dirpath, f"cell_{i:03d}_mask.pgm"), mask.astype(float))
    with open(os.path.join(dirpath, "cells.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id"] + [f"f{i:03d}" for i in range(sample.cell_features.shape[1])])
        for i, row in enumerate(sample.cell_features):
            writer.writerow([f"cell{i:03d}"] + ["%.17g" % v for v in row])
    with open(os.path.join(dirpath, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"channels={C}\n")
        fh.write("prompt=" + ",".join("%.17g" % v for v in sample.prompt_stub) + "\n")


def load_seg_sample(dirpath) -> SegSample:
    meta = {}
    with open(os.path.join(dirpath, "meta.txt"), encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            meta[key] = value
    C = int(meta.get("channels", "1"))
    if C == 1:
        patch = load_pgm(os.path.join(dirpath, "patch.pgm"))[:, :, None]
    else:
        patch = np.stack(
            [load_pgm(os.path.join(dirpath, f"patch_c{c}.pgm")) for c in range(C)], axis=2
        )
    gt = load_pgm(os.path.join(dirpath, "gt_mask.pgm")) > 0.5
    masks = []
    for name in sorted(os.listdir(dirpath)):
        if name.startswith("cell_") and name.endswith("_mask.pgm"):
            masks.append(load_pgm(os.path.join(dirpath, name)) > 0.5)
    feats = []
    with open(os.path.join(dirpath, "cells.csv"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            feats.append([float(v) for v in row[1:]])
    stub = np.array([float(v) for v in meta["prompt"].split(",")])
    return SegSample(
        patch=patch,
        cell_masks=masks,
        cell_features=np.array(feats),
        gt_mask=gt,
        prompt_stub=stub,
    )


# -- multimodal model ------------------------------------------------------------------------

@dataclass
class MultimodalConfig:
    backbone: ModelConfig
    d_img: int = 32
    proj_hidden: int = 32
    decoder_hidden: int = 32
    grid: int = 4
    tile: int = 8
    channels: int = 1
    prompt_dim: int = 8
    encoder: str = "toy"          # "toy" or "frozen"
    freeze_backbone: bool = False

    @property
    def patch_hw(self) -> tuple:
        return (self.grid * self.tile, self.grid * self.tile)


@dataclass
class MultimodalModel:
    config: MultimodalConfig
    backbone: M.ClassifierModel
    proj: ProjectionParams
    encoder_params: object
    prompt_proj: L.LinearParams
    decoder: DecoderParams


def build_multimodal_model(config: MultimodalConfig, seed: int = 0) -> MultimodalModel:
    rng = np.random.default_rng([seed, 1])
    backbone = M.build_model(config.backbone, seed=seed)
    proj = projection_init(rng, config.backbone.d_model, config.proj_hidden, config.d_img)
    if config.encoder == "toy":
        enc = toy_encoder_init(rng, config.grid, config.tile, config.channels, config.d_img)
    elif config.encoder == "frozen":
        enc = frozen_stub_init(rng, config.grid, config.tile, config.channels, config.d_img)
    else:
        raise ValueError(f"unknown encoder {config.encoder!r}")
    prompt_proj = L.linear_init(rng, config.prompt_dim, config.d_img)
    decoder = decoder_init(rng, config.d_img, config.decoder_hidden, config.grid)
    return MultimodalModel(
        config=config,
        backbone=backbone,
        proj=proj,
        encoder_params=enc,
        prompt_proj=prompt_proj,
        decoder=decoder,
    )


def multimodal_forward(model: MultimodalModel, sample: SegSample, use_radiomics: bool = True):
    """Returns (mask_logits [H, W], cell_logits [L, k] or None, aux loss)."""
    cfg = model.config
    if use_radiomics and len(sample.cell_masks) > 0:
        tokens = M.tokenize_features(sample.cell_features, cfg.backbone.token_chunk)
        e_r, aux = M.forward_features(model.backbone, tokens)
        cell_logits = L.linear_forward(e_r, model.backbone.head)
        z_r = project_radiomics(e_r, model.proj)
    else:
        aux = Tensor(0.0)
        cell_logits = None
        z_r = Tensor(np.zeros((0, cfg.d_img)))
    img_tokens = encode_patch(sample.patch, model.encoder_params)
    prompt_tok = L.linear_forward(Tensor(sample.prompt_stub[None, :]), model.prompt_proj)
    z_m = ad.concat([img_tokens, prompt_tok], axis=0)
    z_c = fuse_embeddings(z_r, z_m)
    mask_logits = decode_mask_logits(z_c, model.decoder, z_r.shape[0], cfg.patch_hw)
    return mask_logits, cell_logits, aux


def cell_labels_of(sample: SegSample) -> np.ndarray:
    """Per-cell tumor/non-tumor targets derived by the coverage rule."""
    return np.array(
        [int(cell_label_from_segmentation(m, sample.gt_mask)) for m in sample.cell_masks],
        dtype=np.int64,
    )


def multimodal_loss(model: MultimodalModel, sample: SegSample, use_radiomics: bool = True) -> Tensor:
    """Pixelwise binary cross-entropy on the mask plus the per-cell
    classification cross-entropy plus any MoE aux losses."""
    mask_logits, cell_logits, aux = multimodal_forward(model, sample, use_radiomics)
    target = Tensor(sample.gt_mask.astype(np.float64))
    bce = ad.tmean(ad.sub(ad.softplus(mask_logits), ad.mul(mask_logits, target)))
    loss = ad.add(bce, aux)
    if cell_logits is not None:
        loss = ad.add(loss, M.cross_entropy_loss(cell_logits, cell_labels_of(sample)))
    return loss


def trainable_parameters(model: MultimodalModel):
    params = named_parameters(model)
    if model.config.freeze_backbone:
        params = [(n, t) for n, t in params if not n.startswith("backbone.")]
    return params


def train_multimodal(
    samples: list,
    model: MultimodalModel,
    config: TrainConfig,
    use_radiomics: bool = True,
) -> list:
    """Joint training with a single optimizer; batch default per TrainConfig
    (multimodal runs use batch_size=4). Returns per-batch losses."""
    optimizer = AdamW(
        trainable_parameters(model),
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    losses = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            loss = None
            for i in idx:
                li = multimodal_loss(model, samples[i], use_radiomics)
                loss = li if loss is None else ad.add(loss, li)
            loss = ad.mul(loss, Tensor(1.0 / len(idx)))
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
    return losses


_MM_FIELDS = (
    ("d_img", int),
    ("proj_hidden", int),
    ("decoder_hidden", int),
    ("grid", int),
    ("tile", int),
    ("channels", int),
    ("prompt_dim", int),
    ("encoder", str),
    ("freeze_backbone", lambda v: v == "True"),
)


def save_mm_checkpoint(path, model: MultimodalModel, extra_config: dict | None = None) -> None:
    """Multimodal checkpoint in the same container format as the classifier's."""
    lines = [f"backbone.{line}" for line in M._config_lines(model.config.backbone)]
    lines += [f"mm.{name}={getattr(model.config, name)}" for name, _ in _MM_FIELDS]
    entries = [(f"mm.{name}", t.data) for name, t in named_parameters(model)]
    # frozen-stub weights are not trainable but must persist
    if isinstance(model.encoder_params, FrozenStubParams):
        entries.append(("buffer.encoder_params.proj.weight", model.encoder_params.proj.weight.data))
    M.write_container(path, lines, extra_config, entries)


def load_mm_checkpoint(path):
    config_kv, extra_config, arrays = M.read_container(path)
    backbone_kv = {k.removeprefix("backbone."): v for k, v in config_kv.items() if k.startswith("backbone.")}
    try:
        backbone = M._parse_config(backbone_kv)
        kwargs = {name: conv(config_kv[f"mm.{name}"]) for name, conv in _MM_FIELDS}
    except (KeyError, ValueError) as exc:
        raise M.CheckpointError(f"{path}: bad config section ({exc})") from None
    config = MultimodalConfig(backbone=backbone, **kwargs)
    model = build_multimodal_model(config, seed=0)
    M.load_params_from(arrays, named_parameters(model), "mm.", str(path))
    if isinstance(model.encoder_params, FrozenStubParams):
        buf = arrays.get("buffer.encoder_params.proj.weight")
        if buf is None or buf.shape != model.encoder_params.proj.weight.shape:
            raise M.CheckpointError(f"{path}: frozen encoder buffer missing or mismatched")
        model.encoder_params.proj.weight.data = buf
    return model, extra_config


def evaluate_multimodal(samples: list, model: MultimodalModel, use_radiomics: bool = True):
    """Mean SegMetrics over samples plus mean cell-label accuracy (None when
    radiomics rows are ablated)."""
    fields = {"precision": [], "c_iou": [], "m_iou": [], "c_dice": [], "m_dice": []}
    cell_acc = []
    with no_grad():
        for sample in samples:
            mask_logits, cell_logits, _ = multimodal_forward(model, sample, use_radiomics)
            probs = ad.sigmoid(mask_logits).data
            sm = segmentation_metrics(probs, sample.gt_mask)
            for key in fields:
                fields[key].append(getattr(sm, key))
            if cell_logits is not None:
                labels = cell_labels_of(sample)
                cell_acc.append(float((cell_logits.data.argmax(axis=-1) == labels).mean()))
    mean_metrics = SegMetrics(**{k: float(np.mean(v)) for k, v in fields.items()})
    return mean_metrics, (float(np.mean(cell_acc)) if cell_acc else None)
