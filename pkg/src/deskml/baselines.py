"""Baseline model catalog: MLP, mini-ViT, mini-Mixer, mini-ResNet,
mini-U-Net, and DETR-mini, each wired into the model registry.

These are desk-scale variants meant as forkable starting points; all
hyperparameters below are adjustable through the config.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from . import matchers
from . import rng as R
from . import tensor as T
from .config import Config
from .data import DatasetMetaData
from .models import (ArchitectureHandle, ModelContract, ModelError,
                     classification_loss, classification_metrics,
                     register_model, segmentation_loss, segmentation_metrics)
from .tensor import Tensor


def _dtype(config: Config) -> str:
    return config.get("model.dtype", "f32")


def _classification_contract(config, meta, arch) -> ModelContract:
    smoothing = config.get("model.label_smoothing", 0.0)

    def loss_fn(logits, batch):
        return classification_loss(logits, batch, num_classes=meta.num_classes,
                                   label_smoothing=smoothing)

    return ModelContract(
        config=config, meta=meta, build_model=lambda: arch,
        loss_fn=loss_fn, get_metrics_fn=lambda: classification_metrics)


# ---------------------------------------------------------------------------
# MLP


def build_mlp(config: Config, meta: DatasetMetaData) -> ModelContract:
    hidden = config.get("model.hidden", [64])
    dtype = _dtype(config)
    k = meta.num_classes
    d_in = int(np.prod(meta.input_shape[1:]))

    def init(key, dummy):
        dims = [d_in] + list(hidden) + [k]
        keys = R.split(key, len(dims) - 1)
        params = {}
        for i in range(len(dims) - 1):
            params.update(L.prefixed(f"dense{i}", L.init_dense(
                keys[i], dims[i], dims[i + 1], dtype)))
        return params, {}

    def apply(params, model_state, inputs, train=False, rng=None):
        h = inputs.astype(dtype).reshape((inputs.shape[0], d_in))
        n_layers = len(hidden) + 1
        for i in range(n_layers):
            h = L.dense(h, L.scoped(params, f"dense{i}"))
            if i < n_layers - 1:
                h = T.relu(h)
        return h, model_state

    return _classification_contract(config, meta, ArchitectureHandle(init, apply))


# ---------------------------------------------------------------------------
# ViT


def build_vit(config: Config, meta: DatasetMetaData) -> ModelContract:
    patch = config.get("model.patch_size", 4)
    dim = config.get("model.dim", 64)
    depth = config.get("model.depth", 2)
    heads = config.get("model.heads", 4)
    mlp_dim = config.get("model.mlp_dim", 2 * dim)
    drop = config.get("model.dropout", 0.0)
    dtype = _dtype(config)
    k = meta.num_classes
    _, h, w, c = meta.input_shape
    if h % patch or w % patch:
        raise ModelError(f"input {h}x{w} not divisible by patch {patch}")
    tokens = (h // patch) * (w // patch)

    def init(key, dummy):
        keys = R.split(key, depth + 4)
        params = L.prefixed("patch", L.init_patch_embed(keys[0], patch, c, dim, dtype))
        params["cls_token"] = L.trunc_normal(keys[1], (1, 1, dim), dtype=dtype)
        params.update(L.prefixed("pos", L.init_positional_embedding(
            keys[2], tokens + 1, dim, dtype)))
        for i in range(depth):
            params.update(L.prefixed(f"block{i}", L.init_transformer_block(
                keys[3 + i], dim, mlp_dim, dtype)))
        params.update(L.prefixed("ln", L.init_layer_norm(dim, dtype)))
        params.update(L.prefixed("head", L.init_dense(keys[-1], dim, k, dtype)))
        return params, {}

    def apply(params, model_state, inputs, train=False, rng=None):
        x = L.patch_embed(inputs.astype(dtype), L.scoped(params, "patch"), patch)
        b = x.shape[0]
        cls = params["cls_token"] + T.zeros((b, 1, dim), dtype=dtype)
        x = T.concat([cls, x], axis=1)
        x = L.add_positional_embedding(x, L.scoped(params, "pos"))
        keys = R.split(rng, depth) if rng is not None else [None] * depth
        for i in range(depth):
            x = L.transformer_block(x, L.scoped(params, f"block{i}"), heads,
                                    train=train, drop_rate=drop, key=keys[i])
        x = L.layer_norm(x, L.scoped(params, "ln"))
        logits = L.dense(x[:, 0], L.scoped(params, "head"))
        return logits, model_state

    return _classification_contract(config, meta, ArchitectureHandle(init, apply))


# ---------------------------------------------------------------------------
# Mixer


def build_mixer(config: Config, meta: DatasetMetaData) -> ModelContract:
    patch = config.get("model.patch_size", 4)
    dim = config.get("model.dim", 64)
    depth = config.get("model.depth", 2)
    token_mlp = config.get("model.token_mlp_dim", 32)
    channel_mlp = config.get("model.channel_mlp_dim", 64)
    dtype = _dtype(config)
    k = meta.num_classes
    _, h, w, c = meta.input_shape
    if h % patch or w % patch:
        raise ModelError(f"input {h}x{w} not divisible by patch {patch}")
    tokens = (h // patch) * (w // patch)

    def init(key, dummy):
        keys = R.split(key, depth + 2)
        params = L.prefixed("patch", L.init_patch_embed(keys[0], patch, c, dim, dtype))
        for i in range(depth):
            params.update(L.prefixed(f"block{i}", L.init_mixer_block(
                keys[1 + i], tokens, dim, token_mlp, channel_mlp, dtype)))
        params.update(L.prefixed("ln", L.init_layer_norm(dim, dtype)))
        params.update(L.prefixed("head", L.init_dense(keys[-1], dim, k, dtype)))
        return params, {}

    def apply(params, model_state, inputs, train=False, rng=None):
        x = L.patch_embed(inputs.astype(dtype), L.scoped(params, "patch"), patch)
        for i in range(depth):
            x = L.mixer_block(x, L.scoped(params, f"block{i}"))
        x = L.layer_norm(x, L.scoped(params, "ln"))
        logits = L.dense(T.tmean(x, axis=1), L.scoped(params, "head"))
        return logits, model_state

    return _classification_contract(config, meta, ArchitectureHandle(init, apply))


# ---------------------------------------------------------------------------
# ResNet


def build_resnet(config: Config, meta: DatasetMetaData) -> ModelContract:
    width = config.get("model.width", 16)
    momentum = config.get("model.bn_momentum", 0.9)
    dtype = _dtype(config)
    k = meta.num_classes
    c = meta.input_shape[-1]
    # 2 stages x 2 blocks; second stage doubles width at stride 2
    stages = [(width, 1), (width, 1), (2 * width, 2), (2 * width, 1)]

    def init(key, dummy):
        keys = R.split(key, len(stages) + 2)
        params = L.prefixed("stem", L.init_conv(keys[0], 3, 3, c, width, dtype))
        bp, bs = L.init_batch_norm(width, dtype)
        params.update(L.prefixed("stem_bn", bp))
        state = L.prefixed("stem_bn", bs)
        cin = width
        for i, (cout, stride) in enumerate(stages):
            p, s = L.init_resnet_block(keys[1 + i], cin, cout, stride, dtype)
            params.update(L.prefixed(f"block{i}", p))
            state.update(L.prefixed(f"block{i}", s))
            cin = cout
        params.update(L.prefixed("head", L.init_dense(keys[-1], cin, k, dtype)))
        return params, state

    def apply(params, model_state, inputs, train=False, rng=None):
        h = L.conv(inputs.astype(dtype), L.scoped(params, "stem"))
        h, stem_bn = L.batch_norm(h, L.scoped(params, "stem_bn"),
                                  L.scoped(model_state, "stem_bn"), train, momentum)
        h = T.relu(h)
        new_state = L.prefixed("stem_bn", stem_bn)
        for i, (_, stride) in enumerate(stages):
            h, bs = L.resnet_block(h, L.scoped(params, f"block{i}"),
                                   L.scoped(model_state, f"block{i}"),
                                   train, stride=stride, momentum=momentum)
            new_state.update(L.prefixed(f"block{i}", bs))
        pooled = T.tmean(T.tmean(h, axis=1), axis=1)
        logits = L.dense(pooled, L.scoped(params, "head"))
        return logits, new_state

    return _classification_contract(config, meta, ArchitectureHandle(init, apply))


# ---------------------------------------------------------------------------
# U-Net


def build_unet(config: Config, meta: DatasetMetaData) -> ModelContract:
    width = config.get("model.width", 16)
    dtype = _dtype(config)
    k = meta.num_classes
    _, h, w, c = meta.input_shape
    if h % 4 or w % 4:
        raise ModelError(f"input {h}x{w} must be divisible by 4")

    def init(key, dummy):
        k1, k2, kb, k3, k4, kh = R.split(key, 6)
        params = {}
        params.update(L.prefixed("down1", L.init_double_conv(k1, c, width, dtype)))
        params.update(L.prefixed("down2", L.init_double_conv(k2, width, 2 * width, dtype)))
        params.update(L.prefixed("bottleneck", L.init_double_conv(kb, 2 * width, 4 * width, dtype)))
        params.update(L.prefixed("up1", L.init_double_conv(k3, 4 * width + 2 * width, 2 * width, dtype)))
        params.update(L.prefixed("up2", L.init_double_conv(k4, 2 * width + width, width, dtype)))
        params.update(L.prefixed("head", L.init_conv(kh, 1, 1, width, k, dtype)))
        return params, {}

    def apply(params, model_state, inputs, train=False, rng=None):
        x = inputs.astype(dtype)
        skip1, x = L.unet_down(x, L.scoped(params, "down1"))
        skip2, x = L.unet_down(x, L.scoped(params, "down2"))
        x = L.double_conv(x, L.scoped(params, "bottleneck"))
        x = L.unet_up(x, skip2, L.scoped(params, "up1"))
        x = L.unet_up(x, skip1, L.scoped(params, "up2"))
        logits = L.conv(x, L.scoped(params, "head"))
        return logits, model_state

    return ModelContract(
        config=config, meta=meta,
        build_model=lambda: ArchitectureHandle(init, apply),
        loss_fn=segmentation_loss,
        get_metrics_fn=lambda: segmentation_metrics)


# ---------------------------------------------------------------------------
# DETR-mini


def _match_targets(class_logits: np.ndarray, boxes: np.ndarray,
                   tcls: np.ndarray, tbox: np.ndarray, no_object: int,
                   lambda_cls: float, lambda_box: float):
    """Per-image optimal target->slot assignments.

    Cost of putting target j on slot s is
    lambda_cls * (1 - p_s(class_j)) + lambda_box * L1(box_s, box_j).
    Returns a list of (target_indices, slot_indices) pairs.
    """
    b, s, _ = class_logits.shape
    out = []
    for i in range(b):
        real = np.nonzero(tcls[i] != no_object)[0]
        if len(real) == 0:
            out.append((real, np.array([], np.int64)))
            continue
        z = class_logits[i] - class_logits[i].max(-1, keepdims=True)
        prob = np.exp(z) / np.exp(z).sum(-1, keepdims=True)  # [s, k+1]
        cls_cost = 1.0 - prob[:, tcls[i][real]].T  # [n, s]
        box_cost = np.abs(tbox[i][real][:, None, :] - boxes[i][None, :, :]).sum(-1)
        cost = lambda_cls * cls_cost + lambda_box * box_cost
        asg = matchers.hungarian(cost)
        out.append((real, np.asarray(asg.row_to_col, np.int64)))
    return out


def build_detr_mini(config: Config, meta: DatasetMetaData) -> ModelContract:
    dim = config.get("model.dim", 64)
    heads = config.get("model.heads", 4)
    enc_depth = config.get("model.encoder_depth", 2)
    dec_depth = config.get("model.decoder_depth", 2)
    mlp_dim = config.get("model.mlp_dim", 2 * dim)
    num_slots = config.get("model.num_slots", 8)
    max_objects = config.get("dataset.max_objects", 3)
    lambda_cls = config.get("model.lambda_cls", 1.0)
    lambda_box = config.get("model.lambda_box", 5.0)
    algorithm = config.get("model.matcher", "hungarian")
    dtype = _dtype(config)
    if num_slots < max_objects:
        raise ModelError(f"num_slots {num_slots} < max_objects {max_objects}")
    k = meta.num_classes
    no_object = k
    _, h, w, c = meta.input_shape
    if h % 4 or w % 4:
        raise ModelError(f"input {h}x{w} must be divisible by 4")
    tokens = (h // 4) * (w // 4)

    def init(key, dummy):
        keys = R.split(key, enc_depth + dec_depth + 6)
        i = 0
        params = L.prefixed("conv1", L.init_conv(keys[i], 3, 3, c, dim // 2, dtype)); i += 1
        params.update(L.prefixed("conv2", L.init_conv(keys[i], 3, 3, dim // 2, dim, dtype))); i += 1
        params.update(L.prefixed("pos", L.init_positional_embedding(keys[i], tokens, dim, dtype))); i += 1
        for e in range(enc_depth):
            params.update(L.prefixed(f"enc{e}", L.init_transformer_block(
                keys[i], dim, mlp_dim, dtype))); i += 1
        params["queries"] = L.trunc_normal(keys[i], (num_slots, dim), dtype=dtype); i += 1
        for d in range(dec_depth):
            params.update(L.prefixed(f"dec{d}", L.init_decoder_block(
                keys[i], dim, mlp_dim, dtype))); i += 1
        params.update(L.prefixed("cls_head", L.init_dense(keys[i], dim, k + 1, dtype))); i += 1
        params.update(L.prefixed("box_head", L.init_dense(keys[i], dim, 4, dtype)))
        return params, {}

    def apply(params, model_state, inputs, train=False, rng=None):
        b = inputs.shape[0]
        x = T.relu(L.conv(inputs.astype(dtype), L.scoped(params, "conv1"), stride=2))
        x = T.relu(L.conv(x, L.scoped(params, "conv2"), stride=2))
        x = x.reshape((b, tokens, dim))
        x = L.add_positional_embedding(x, L.scoped(params, "pos"))
        for e in range(enc_depth):
            x = L.transformer_block(x, L.scoped(params, f"enc{e}"), heads, train=train)
        q = params["queries"] + T.zeros((b, num_slots, dim), dtype=dtype)
        for d in range(dec_depth):
            q = L.decoder_block(q, x, L.scoped(params, f"dec{d}"), heads)
        class_logits = L.dense(q, L.scoped(params, "cls_head"))
        boxes = T.sigmoid(L.dense(q, L.scoped(params, "box_head")))
        return {"class_logits": class_logits, "boxes": boxes}, model_state

    def loss_fn(outputs, batch):
        logits = outputs["class_logits"]
        boxes = outputs["boxes"]
        b, s, _ = logits.shape
        tcls = batch["label"].data
        tbox = batch["boxes"].data
        mask = np.ones(b) if "batch_mask" not in batch \
            else batch["batch_mask"].data.astype(np.float64)
        matches = _match_targets(logits.data, boxes.data, tcls, tbox,
                                 no_object, lambda_cls, lambda_box)
        # classification targets over all slots; no-object where unmatched
        slot_cls = np.full((b, s), no_object, np.int64)
        sel = np.zeros((b, max_objects, s))  # one-hot target->slot
        n_obj = np.zeros(b)
        for i, (targets, slots) in enumerate(matches):
            slot_cls[i, slots] = tcls[i][targets]
            sel[i, targets, slots] = 1.0
            n_obj[i] = len(targets)
        onehot = np.eye(k + 1)[slot_cls]
        logp = T.log_softmax(logits, axis=-1)
        ce = -T.tsum(logp * Tensor(onehot.astype(logits.data.dtype)), axis=-1)
        ce_per_image = T.tmean(ce, axis=-1)
        # L1 over matched slots, normalized per image by its object count
        matched = Tensor(sel.astype(boxes.data.dtype)) @ boxes  # [b, M, 4]
        diff = matched - Tensor(tbox.astype(boxes.data.dtype)) * Tensor(
            sel.sum(-1, keepdims=True).astype(boxes.data.dtype))
        l1 = T.tsum(T.tsum(T.relu(diff) + T.relu(-diff), axis=-1), axis=-1)
        l1_per_image = l1 * Tensor((1.0 / np.maximum(n_obj, 1.0)).astype(boxes.data.dtype))
        per_image = ce_per_image + l1_per_image * lambda_box
        denom = mask.sum()
        if denom <= 0:
            raise ModelError("all examples masked out")
        return T.tsum(per_image * Tensor(mask.astype(logits.data.dtype))) * (1.0 / denom)

    def metric_fn(outputs, label, batch_mask=None, boxes=None):
        logits = outputs["class_logits"].data
        pboxes = outputs["boxes"].data
        b = logits.shape[0]
        tcls = label.data
        tbox = boxes.data
        mask = np.ones(b) if batch_mask is None else batch_mask.data.astype(np.float64)
        matches = _match_targets(logits, pboxes, tcls, tbox,
                                 no_object, lambda_cls, lambda_box)
        correct = 0.0
        objects = 0.0
        l1_sum = 0.0
        loss_sum = 0.0
        for i, (targets, slots) in enumerate(matches):
            if mask[i] == 0:
                continue
            pred_cls = logits[i, slots].argmax(-1)
            correct += float((pred_cls == tcls[i][targets]).sum())
            objects += float(len(targets))
            if len(targets):
                l1_sum += float(np.abs(pboxes[i, slots] - tbox[i][targets]).mean(-1).sum())
        # per-image loss recomputed batch-wise for the loss metric
        sub = {"label": label, "boxes": boxes}
        if batch_mask is not None:
            sub["batch_mask"] = batch_mask
        loss_sum = float(loss_fn(
            {"class_logits": Tensor(logits), "boxes": Tensor(pboxes)}, sub
        ).item()) * float(mask.sum())
        return {
            "matched_accuracy": (correct, max(objects, 0.0)),
            "box_l1": (l1_sum, objects),
            "loss": (loss_sum, float(mask.sum())),
        }

    return ModelContract(
        config=config, meta=meta,
        build_model=lambda: ArchitectureHandle(init, apply),
        loss_fn=loss_fn, get_metrics_fn=lambda: metric_fn)


# ---------------------------------------------------------------------------
# catalog

BASELINES = {
    "fully_connected_classification": (build_mlp, {"dataset": {"name": "blobs_classification"}}, "classification"),
    "vit_classification": (build_vit, {"dataset": {"name": "blobs_classification", "input_shape": [8, 8, 1]}}, "classification"),
    "mixer_classification": (build_mixer, {"dataset": {"name": "blobs_classification", "input_shape": [8, 8, 1]}}, "classification"),
    "resnet_classification": (build_resnet, {"dataset": {"name": "blobs_classification", "input_shape": [8, 8, 1]}}, "classification"),
    "unet_segmentation": (build_unet, {"dataset": {"name": "shapes_segmentation"}}, "segmentation"),
    "detr_detection": (build_detr_mini, {"dataset": {"name": "boxes_detection"}}, "detection"),
}

for _name, (_factory, _defaults, _kind) in BASELINES.items():
    register_model(_name, _factory)
