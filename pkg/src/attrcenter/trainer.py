"""Joint training of the coupled encoders and the center lattice.

Each step samples photo/genuine/impostor triplets that share an attribute
combination, pushes the composite margin loss backward, applies SGD to both
encoders, and moves centers two ways: a gradient step on the separation term
and the mini-batch averaged pull toward their assigned embeddings. Center
attraction deliberately bypasses the attribute hinge (the averaged rule keeps
centers tracking their clusters even when every hinge is slack).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from attrcenter import autodiff as ad
from attrcenter import losses as L
from attrcenter.autodiff import DiffTensor, NonFiniteError
from attrcenter.encoders import Encoder, EncoderConfig, assemble_sketch_input, desk_config
from attrcenter.lattice import AttributeCombination, AttributeSchema, CenterRegistry
from attrcenter.synth import DatasetManifest, hflip, load_image, random_tps, scale_crop


class TrainError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Desk-scale training knobs; margins follow the squared-distance convention."""

    batch_size: int = 8
    learning_rate: float = 0.005
    center_update_rate: float = 0.1   # averaged-pull rate, in (0, 1]
    center_sep_rate: float = 0.1      # step size for the separation gradient on centers
    margin_unit: float = 4.0
    attribute_margin: float = 1.0
    identity_margin: float = 1.5
    loss_weights: tuple = (1.0, 1.0, 1.0)
    epochs: int = 4
    seed: int = 0
    embedding_dim: int = 16
    encoder_channels: tuple = (8, 16)
    image_size: tuple = (32, 32)
    momentum: float = 0.0             # 0 = plain SGD
    clip_grad_norm: float = 100.0     # global norm cap over encoder grads; 0 disables
    center_init_scale: float = 1.0
    center_warm_start: bool = True    # move centers onto initial cluster means (one alpha=1 pass)
    bn_calibration_passes: int = 25   # post-training forward passes to settle BN running stats
    use_attributes: bool = True       # False: zero the sketch attribute planes
    augment: bool = False
    augment_tps_frac: float = 0.03
    augment_scale_max: float = 1.15

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0 or self.center_sep_rate < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0.0 <= self.center_update_rate <= 1.0:
            raise ValueError(f"center_update_rate must be in [0, 1], got {self.center_update_rate}")
        if not self.identity_margin < 2.0 * self.attribute_margin:
            raise ValueError(
                f"identity margin {self.identity_margin} must be < 2 * attribute margin")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ValueError(f"loss_weights must be 3 non-negative values, got {self.loss_weights}")


@dataclass
class TrainingTriplet:
    """One unit of loss evaluation: a photo with a genuine and an impostor sketch
    that all carry the same attribute combination."""

    photo: np.ndarray
    sketch_genuine: np.ndarray
    sketch_impostor: np.ndarray
    combo: AttributeCombination
    photo_identity: int
    impostor_identity: int


class ImageStore:
    """Tiny path -> array cache so repeated sampling never re-reads PNGs."""

    def __init__(self):
        self._cache: dict = {}

    def get(self, path: Path) -> np.ndarray:
        key = str(path)
        if key not in self._cache:
            self._cache[key] = load_image(path)
        return self._cache[key]


def sample_batch(manifest: DatasetManifest, schema: AttributeSchema, m: int,
                 rng: np.random.Generator, store: Optional[ImageStore] = None,
                 augment: bool = False, config: Optional[TrainConfig] = None) -> list:
    """Draw m triplets; impostors share the anchor's combination, never its identity.

    Combinations represented by a single identity cannot produce impostors and
    are skipped; an error is raised only if nothing remains.
    """
    store = store or ImageStore()
    by_combo: dict = {}
    for row in manifest.rows:
        by_combo.setdefault(row.combo, []).append(row)
    valid = {c: rows for c, rows in by_combo.items()
             if len({r.identity for r in rows}) >= 2}
    if not valid:
        raise TrainError("no attribute combination has two identities; cannot form impostor pairs")
    pool = [r for rows in valid.values() for r in rows]

    triplets = []
    for _ in range(m):
        anchor = pool[int(rng.integers(len(pool)))]
        candidates = [r for r in valid[anchor.combo] if r.identity != anchor.identity]
        imp = candidates[int(rng.integers(len(candidates)))]
        photo = store.get(manifest.photo_path(anchor))
        sk_g = store.get(manifest.sketch_path(anchor))
        sk_im = store.get(manifest.sketch_path(imp))
        if augment:
            cfg = config or TrainConfig()
            photo, sk_g, sk_im = (
                _augment_image(img, rng, cfg) for img in (photo, sk_g, sk_im))
        triplets.append(TrainingTriplet(
            photo=photo, sketch_genuine=sk_g, sketch_impostor=sk_im,
            combo=schema.decode(anchor.combo),
            photo_identity=anchor.identity, impostor_identity=imp.identity))
    return triplets


def _augment_image(img: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    h, w = img.shape[-2:]
    out = random_tps(img, rng, max_disp_frac=cfg.augment_tps_frac)
    out = scale_crop(out, rng, scale_range=(1.0, cfg.augment_scale_max), crop_hw=(h, w))
    return hflip(out, rng, p=0.5)


@dataclass
class TrainState:
    config: TrainConfig
    schema: AttributeSchema
    photo_encoder: Encoder
    sketch_encoder: Encoder
    registry: CenterRegistry
    rng: np.random.Generator
    epoch: int = 0
    velocities: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def named_parameters(self) -> list:
        out = [(f"photo.{n}", t) for n, t in self.photo_encoder.parameters()]
        out += [(f"sketch.{n}", t) for n, t in self.sketch_encoder.parameters()]
        return out


def init_state(config: TrainConfig, schema: AttributeSchema) -> TrainState:
    h, w = config.image_size
    from dataclasses import replace as dc_replace
    photo_cfg = desk_config(3, config.embedding_dim, h, w, channels=config.encoder_channels)
    sketch_cfg = dc_replace(
        desk_config(1 + schema.binary_attribute_count, config.embedding_dim, h, w,
                    channels=config.encoder_channels),
        attribute_channels=schema.binary_attribute_count)
    photo_enc = Encoder(photo_cfg, seed=config.seed)
    sketch_enc = Encoder(sketch_cfg, seed=config.seed + 1)
    registry = CenterRegistry(schema, config.embedding_dim,
                              margin_unit=config.margin_unit,
                              attribute_margin=config.attribute_margin,
                              identity_margin=config.identity_margin)
    registry.init_centers(seed=config.seed + 2, scale=config.center_init_scale)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(77,)))
    return TrainState(config=config, schema=schema, photo_encoder=photo_enc,
                      sketch_encoder=sketch_enc, registry=registry, rng=rng)


def update_centers(registry: CenterRegistry, embeddings: np.ndarray, y: np.ndarray,
                   alpha: float) -> None:
    """Averaged mini-batch pull: each used center moves toward the mean of its
    assigned embeddings, scaled by alpha; unused centers stay put."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    emb = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(y)
    n_c, d = registry.centers.shape
    if emb.ndim != 2 or emb.shape[1] != d:
        raise ValueError(f"embeddings must be (k, {d}), got {emb.shape}")
    counts = np.bincount(y, minlength=n_c).astype(np.float64)
    sums = np.zeros((n_c, d), dtype=np.float64)
    np.add.at(sums, y, emb)
    centers = registry.centers.data.astype(np.float64)
    delta = (centers * counts[:, None] - sums) / (1.0 + counts[:, None])
    registry.centers.data[...] = (centers - alpha * delta).astype(registry.centers.dtype)


def _stack_batch(triplets: list, config: TrainConfig):
    photos = np.stack([t.photo for t in triplets]).astype(np.float32)
    gen = np.stack([
        assemble_sketch_input(t.sketch_genuine, t.combo,
                              use_attributes=config.use_attributes).stacked()
        for t in triplets]).astype(np.float32)
    imp = np.stack([
        assemble_sketch_input(t.sketch_impostor, t.combo,
                              use_attributes=config.use_attributes).stacked()
        for t in triplets]).astype(np.float32)
    y = np.asarray([t.combo.index for t in triplets], dtype=np.int64)
    return photos, gen, imp, y


def train_step(state: TrainState, triplets: list) -> L.LossBreakdown:
    """One optimization step; returns the pre-update loss breakdown."""
    cfg = state.config
    photos, gen, imp, y = _stack_batch(triplets, cfg)
    w_attr, w_id, w_cen = cfg.loss_weights
    registry = state.registry

    with ad.Tape():
        p_emb = state.photo_encoder.encode(photos, train=True)
        g_emb = state.sketch_encoder.encode(gen, train=True)
        i_emb = state.sketch_encoder.encode(imp, train=True)
        batch = L.BatchEmbeddings(photos=p_emb, genuine=g_emb, impostor=i_emb, combo=y)
        # attribute term sees a detached center copy: encoder gradients flow,
        # center motion is left to the averaged pull + the separation gradient
        frozen = registry.centers.detach()
        terms = {}
        for name, build in (
                ("attribute", lambda: L.attribute_loss(batch, registry, centers=frozen)),
                ("identity", lambda: L.identity_loss(batch, registry)),
                ("center-separation", lambda: L.center_separation_loss(registry))):
            try:
                terms[name] = build()
            except NonFiniteError as exc:
                raise TrainError(f"{name} loss term produced a non-finite value: {exc}") from exc
        total = ad.add(ad.add(w_attr * terms["attribute"], w_id * terms["identity"]),
                       w_cen * terms["center-separation"])
        if not np.isfinite(total.data):
            raise TrainError("total loss is non-finite")
        ad.backward(total)

    params = state.named_parameters()
    if cfg.clip_grad_norm > 0.0:
        total_sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                       for _, p in params if p.grad is not None)
        norm = np.sqrt(total_sq)
        if norm > cfg.clip_grad_norm:
            shrink = cfg.clip_grad_norm / norm
            for _, p in params:
                if p.grad is not None:
                    p.grad *= np.asarray(shrink, dtype=p.grad.dtype)

    for name, param in params:
        g = param.grad
        if g is None:
            continue
        if cfg.momentum > 0.0:
            v = state.velocities.get(name)
            if v is None:
                v = np.zeros_like(param.data)
            v = cfg.momentum * v + g
            state.velocities[name] = v
            step_dir = v
        else:
            step_dir = g
        param.data -= (cfg.learning_rate * step_dir).astype(param.data.dtype)
        param.grad = None

    cgrad = registry.centers.grad
    if cgrad is not None and cfg.center_sep_rate > 0.0:
        registry.centers.data -= (cfg.center_sep_rate * cgrad).astype(registry.centers.dtype)
    registry.centers.grad = None

    all_emb = np.concatenate([p_emb.data, g_emb.data, i_emb.data], axis=0)
    update_centers(registry, all_emb, np.concatenate([y, y, y]), cfg.center_update_rate)

    breakdown = L.LossBreakdown(total=total.detach(), attr=terms["attribute"].detach(),
                                id=terms["identity"].detach(), cen=terms["center-separation"].detach())
    return breakdown


def warm_start_centers(state: TrainState, manifest: DatasetManifest,
                       store: ImageStore) -> None:
    """One full-data averaged update at alpha=1: centers land on their combo's
    initial embedding mean, so training starts with the attribute hinge slack
    instead of dragging every cluster across the embedding space."""
    cfg = state.config
    embs = []
    ys = []
    rows = manifest.rows
    for start in range(0, len(rows), 32):
        chunk = rows[start:start + 32]
        photos = np.stack([store.get(manifest.photo_path(r)) for r in chunk]).astype(np.float32)
        sketches = np.stack([
            assemble_sketch_input(store.get(manifest.sketch_path(r)), state.schema.decode(r.combo),
                                  use_attributes=cfg.use_attributes).stacked()
            for r in chunk]).astype(np.float32)
        embs.append(state.photo_encoder.encode(photos).data)
        embs.append(state.sketch_encoder.encode(sketches).data)
        y = np.asarray([r.combo for r in chunk], dtype=np.int64)
        ys.extend([y, y])
    update_centers(state.registry, np.concatenate(embs, axis=0), np.concatenate(ys), alpha=1.0)


def train(manifest: DatasetManifest, config: TrainConfig, schema: AttributeSchema,
          state: Optional[TrainState] = None, trace_path: Optional[Path] = None,
          store: Optional[ImageStore] = None) -> TrainState:
    """Run ``config.epochs`` passes of sampled batches over the manifest."""
    fresh = state is None
    state = state or init_state(config, schema)
    store = store or ImageStore()
    if fresh and config.center_warm_start:
        warm_start_centers(state, manifest, store)
    steps_per_epoch = max(1, (len(manifest.rows) + config.batch_size - 1) // config.batch_size)
    trace_file = None
    if trace_path is not None:
        trace_path = Path(trace_path)
        new = not trace_path.exists()
        trace_file = open(trace_path, "a")
        if new:
            trace_file.write("epoch,step,total,attr,id,cen\n")
    try:
        for _ in range(config.epochs):
            for step in range(steps_per_epoch):
                triplets = sample_batch(manifest, schema, config.batch_size, state.rng,
                                        store=store, augment=config.augment, config=config)
                bd = train_step(state, triplets)
                vals = bd.values()
                row = (state.epoch, step, vals["total"], vals["attr"], vals["id"], vals["cen"])
                state.trace.append(row)
                if trace_file is not None:
                    trace_file.write(f"{row[0]},{row[1]},{row[2]:.6f},{row[3]:.6f},{row[4]:.6f},{row[5]:.6f}\n")
            state.epoch += 1
    finally:
        if trace_file is not None:
            trace_file.close()
    calibrate_norm_stats(state, manifest, store)
    return state


def calibrate_norm_stats(state: TrainState, manifest: DatasetManifest,
                         store: ImageStore) -> None:
    """Settle BN running statistics with plain forward passes (no updates).

    Running averages lag the fast-moving batch statistics seen in training;
    inference-mode encoding needs them re-estimated on the final weights.
    """
    cfg = state.config
    if cfg.bn_calibration_passes <= 0:
        return
    if (state.photo_encoder.config.norm_kind != "batch"
            and state.sketch_encoder.config.norm_kind != "batch"):
        return
    rows = manifest.rows
    photos = np.stack([store.get(manifest.photo_path(r)) for r in rows]).astype(np.float32)
    sketches = np.stack([
        assemble_sketch_input(store.get(manifest.sketch_path(r)), state.schema.decode(r.combo),
                              use_attributes=cfg.use_attributes).stacked()
        for r in rows]).astype(np.float32)
    for _ in range(cfg.bn_calibration_passes):
        if state.photo_encoder.config.norm_kind == "batch":
            state.photo_encoder.encode(photos, train=True)
        if state.sketch_encoder.config.norm_kind == "batch":
            state.sketch_encoder.encode(sketches, train=True)


# ---------------------------------------------------------------------------
# checkpoints: magic 'ACLM', u32 version, 8-byte schema hash, then
# length-prefixed named records of little-endian float32 values
# ---------------------------------------------------------------------------

_MAGIC = b"ACLM"
_VERSION = 1


def _encode_u128(value: int) -> list:
    return [float((value >> (16 * i)) & 0xFFFF) for i in range(8)]


def _decode_u128(chunks) -> int:
    return sum(int(round(c)) << (16 * i) for i, c in enumerate(chunks))


def _rng_to_record(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported RNG {st['bit_generator']}")
    vals = (_encode_u128(st["state"]["state"]) + _encode_u128(st["state"]["inc"])
            + [float(st["has_uint32"])] + _encode_u128(st["uinteger"])[:2])
    return np.asarray(vals, dtype=np.float64)


def _rng_from_record(vals: np.ndarray) -> np.random.Generator:
    state = _decode_u128(vals[0:8])
    inc = _decode_u128(vals[8:16])
    has = int(round(float(vals[16])))
    uinteger = _decode_u128(list(vals[17:19]) + [0.0] * 6)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": has, "uinteger": uinteger,
    }
    return rng


def _encoder_config_record(cfg: EncoderConfig) -> np.ndarray:
    vals = [cfg.input_channels, cfg.input_height, cfg.input_width, cfg.embedding_dim,
            1.0 if cfg.final_projection else 0.0,
            0.0 if cfg.pool_kind == "avg" else 1.0,
            1.0 if cfg.normalize_input else 0.0,
            0.0 if cfg.norm_kind == "batch" else 1.0,
            cfg.attribute_channels, len(cfg.stages)]
    for st in cfg.stages:
        vals.extend([st.out_channels, st.kernel, st.stride, st.pool])
    return np.asarray(vals, dtype=np.float64)


def _encoder_config_from_record(vals: np.ndarray) -> EncoderConfig:
    from attrcenter.encoders import ConvStage
    ints = [int(round(float(v))) for v in vals]
    n_stages = ints[9]
    stages = tuple(ConvStage(*ints[10 + 4 * i: 14 + 4 * i]) for i in range(n_stages))
    return EncoderConfig(input_channels=ints[0], input_height=ints[1], input_width=ints[2],
                         stages=stages, embedding_dim=ints[3],
                         final_projection=bool(ints[4]),
                         pool_kind="avg" if ints[5] == 0 else "max",
                         normalize_input=bool(ints[6]),
                         norm_kind="batch" if ints[7] == 0 else "affine",
                         attribute_channels=ints[8])


def _config_record(cfg: TrainConfig) -> np.ndarray:
    return np.asarray([
        cfg.batch_size, cfg.learning_rate, cfg.center_update_rate, cfg.center_sep_rate,
        cfg.margin_unit, cfg.attribute_margin, cfg.identity_margin,
        cfg.loss_weights[0], cfg.loss_weights[1], cfg.loss_weights[2],
        cfg.epochs, cfg.seed, cfg.embedding_dim, cfg.image_size[0], cfg.image_size[1],
        cfg.momentum, cfg.center_init_scale,
        1.0 if cfg.use_attributes else 0.0, 1.0 if cfg.augment else 0.0,
        cfg.augment_tps_frac, cfg.augment_scale_max, cfg.clip_grad_norm,
        1.0 if cfg.center_warm_start else 0.0, cfg.bn_calibration_passes,
        len(cfg.encoder_channels), *cfg.encoder_channels,
    ], dtype=np.float64)


def _config_from_record(v: np.ndarray) -> TrainConfig:
    return TrainConfig(
        batch_size=int(v[0]), learning_rate=float(v[1]), center_update_rate=float(v[2]),
        center_sep_rate=float(v[3]), margin_unit=float(v[4]), attribute_margin=float(v[5]),
        identity_margin=float(v[6]), loss_weights=(float(v[7]), float(v[8]), float(v[9])),
        epochs=int(v[10]), seed=int(v[11]), embedding_dim=int(v[12]),
        image_size=(int(v[13]), int(v[14])), momentum=float(v[15]),
        center_init_scale=float(v[16]), use_attributes=bool(int(v[17])),
        augment=bool(int(v[18])), augment_tps_frac=float(v[19]), augment_scale_max=float(v[20]),
        clip_grad_norm=float(v[21]), center_warm_start=bool(int(v[22])),
        bn_calibration_passes=int(v[23]),
        encoder_channels=tuple(int(c) for c in v[25:25 + int(v[24])]))


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    shape = arr.shape
    fh.write(struct.pack("<I", len(shape)))
    for dim in shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_record(fh):
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise CheckpointError("truncated checkpoint file")
    (nlen,) = struct.unpack("<I", head)
    name = _read_exact(fh, nlen).decode()
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data


def save_checkpoint(state: TrainState, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(state.schema.content_hash())
        _write_record(fh, "meta.train_config", _config_record(state.config))
        _write_record(fh, "meta.encoder.photo", _encoder_config_record(state.photo_encoder.config))
        _write_record(fh, "meta.encoder.sketch", _encoder_config_record(state.sketch_encoder.config))
        _write_record(fh, "meta.epoch", np.asarray([state.epoch], dtype=np.float64))
        _write_record(fh, "meta.rng", _rng_to_record(state.rng))
        _write_record(fh, "centers", state.registry.centers.data)
        for name, param in state.named_parameters():
            _write_record(fh, f"param.{name}", param.data)
        for prefix, enc in (("photo", state.photo_encoder), ("sketch", state.sketch_encoder)):
            for name, buf in sorted(enc.buffers.items()):
                _write_record(fh, f"buffer.{prefix}.{name}", buf)
        for name, vel in sorted(state.velocities.items()):
            _write_record(fh, f"vel.{name}", vel)


def load_checkpoint(path: Path, schema: AttributeSchema) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}; not an attrcenter checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version > _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (supported <= {_VERSION})")
        schema_hash = _read_exact(fh, 8)
        if schema_hash != schema.content_hash():
            raise CheckpointError("schema hash mismatch: checkpoint was written for a different schema")
        records = {}
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            records[rec[0]] = rec[1]

    for key in ("meta.train_config", "meta.encoder.photo", "meta.encoder.sketch",
                "meta.epoch", "meta.rng", "centers"):
        if key not in records:
            raise CheckpointError(f"checkpoint missing record {key!r}")

    config = _config_from_record(records["meta.train_config"].astype(np.float64))
    photo_cfg = _encoder_config_from_record(records["meta.encoder.photo"])
    sketch_cfg = _encoder_config_from_record(records["meta.encoder.sketch"])
    photo_enc = Encoder(photo_cfg, seed=config.seed)
    sketch_enc = Encoder(sketch_cfg, seed=config.seed + 1)
    registry = CenterRegistry(schema, config.embedding_dim,
                              margin_unit=config.margin_unit,
                              attribute_margin=config.attribute_margin,
                              identity_margin=config.identity_margin)
    registry.centers.data[...] = records["centers"]
    state = TrainState(config=config, schema=schema, photo_encoder=photo_enc,
                       sketch_encoder=sketch_enc, registry=registry,
                       rng=_rng_from_record(records["meta.rng"].astype(np.float64)),
                       epoch=int(records["meta.epoch"][0]))
    for name, param in state.named_parameters():
        key = f"param.{name}"
        if key not in records:
            raise CheckpointError(f"checkpoint missing record {key!r}")
        if records[key].shape != param.shape:
            raise CheckpointError(f"record {key!r} has shape {records[key].shape}, expected {param.shape}")
        param.data[...] = records[key]
    for prefix, enc in (("photo", photo_enc), ("sketch", sketch_enc)):
        for name in enc.buffers:
            key = f"buffer.{prefix}.{name}"
            if key not in records:
                raise CheckpointError(f"checkpoint missing record {key!r}")
            enc.buffers[name] = records[key].astype(np.float32).copy()
    for key, arr in records.items():
        if key.startswith("vel."):
            state.velocities[key[4:]] = arr.astype(np.float32).copy()
    return state
