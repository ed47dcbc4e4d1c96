"""Full classifier: siamese encoder + double-attention head + checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from . import head as hd
from .autodiff import Tensor
from .data import SEP, Batch, LabelSet, Vocab, encode_label_sequence
from .encoder import (
    EncoderConfig,
    encode,
    encode_labels_once,
    init_encoder_params,
    pool_label_vectors,
)
from .head import AblationConfig, AttentionParams, IdeaFeatures, idea_loss

CHECKPOINT_MAGIC = b"IDEACKP1"


class IdeaModel:
    """Bundles the shared encoder, head and classifier parameters.

    The label sequence is fixed at construction; every forward pass
    encodes it once and broadcasts across the batch.
    """

    def __init__(
        self,
        encoder_config: EncoderConfig,
        label_names: list[str],
        label_ids: list[int],
        label_spans: list[tuple[int, int]],
        ablation: AblationConfig = AblationConfig("full"),
        gamma_mode: str = "per-sample",
        dtype=np.float32,
        rng: np.random.Generator | None = None,
        classifier_init: str = "zeros",
        params: dict[str, Tensor] | None = None,
    ):
        if gamma_mode not in hd.GAMMA_MODES:
            raise ValueError(f"unknown gamma mode {gamma_mode!r}")
        self.encoder_config = encoder_config
        self.label_names = list(label_names)
        self.label_ids = np.asarray(label_ids, dtype=np.int64)
        self.label_spans = [tuple(s) for s in label_spans]
        self.ablation = ablation
        self.gamma_mode = gamma_mode
        self.dtype = np.dtype(dtype)
        self.n_classes = len(label_names)
        if params is not None:
            self.params = params
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params = init_encoder_params(encoder_config, rng, dtype)
            self.params.update(hd.init_head_params(encoder_config.d, rng, dtype))
            self.params.update(
                hd.init_classifier_params(
                    ablation.z_width(encoder_config.d),
                    self.n_classes,
                    rng,
                    dtype,
                    init=classifier_init,
                )
            )

    @classmethod
    def build(cls, encoder_config, labels: LabelSet, vocab: Vocab, **kwargs) -> "IdeaModel":
        label_ids, spans = encode_label_sequence(labels, vocab)
        return cls(encoder_config, labels.names, label_ids, spans, **kwargs)

    def attention_params(self) -> AttentionParams:
        return AttentionParams(
            W_m=self.params["attn.W_m"],
            b_m=self.params["attn.b_m"],
            W_t=self.params["attn.W_t"],
            b_t=self.params["attn.b_t"],
        )

    def reg_params(self) -> list[Tensor]:
        # weight matrices only: the two attention bilinear forms and the classifier
        return [self.params["attn.W_m"], self.params["attn.W_t"], self.params["clf.W"]]

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(
        self,
        token_ids: np.ndarray,
        pad_mask: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, IdeaFeatures]:
        ids = np.asarray(token_ids)
        mask = np.asarray(pad_mask, dtype=bool)
        k_batch = ids.shape[0]
        d = self.encoder_config.d

        enc = encode(ids, mask, self.encoder_config, self.params, training, rng)
        lab = encode_labels_once(self.label_ids, self.encoder_config, self.params, training, rng)
        label_vecs = ad.broadcast_to(
            pool_label_vectors(lab, self.label_spans), (k_batch, self.n_classes, d)
        )
        m_global = ad.broadcast_to(lab.pooled, (k_batch, d))

        # query vectors: token positions only (drop CLS, mask out SEP and PAD)
        text_tokens = ad.slice_axis(enc.tokens, 1, 1, ids.shape[1])
        query_mask = mask[:, 1:] & (ids[:, 1:] != SEP)

        attn = self.attention_params()
        alpha, c = hd.text_attention(text_tokens, m_global, attn, query_mask)
        beta, s = hd.label_attention(label_vecs, enc.pooled, attn)
        p, d_feat = hd.similarity_features(c, s)
        p_w, d_w, gamma = hd.weighted_features(p, d_feat, self.gamma_mode)
        z = hd.assemble_z(c, p_w, d_w, s, self.ablation)
        z = ad.dropout(z, self.encoder_config.dropout, training, rng)
        logits = hd.classify(z, self.params["clf.W"], self.params["clf.b"])
        return logits, IdeaFeatures(alpha, beta, c, s, p, d_feat, gamma, z)

    def loss(
        self,
        batch: Batch,
        lambda_l2: float,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor, IdeaFeatures]:
        logits, feats = self.forward(batch.token_ids, batch.pad_mask, training, rng)
        return idea_loss(logits, batch.gold, self.reg_params(), lambda_l2), logits, feats

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        """Named parameters as raw little-endian float32, after a JSON header."""
        header = {
            "encoder": asdict(self.encoder_config),
            "ablation": self.ablation.mode,
            "gamma_mode": self.gamma_mode,
            "label_names": self.label_names,
            "label_ids": [int(i) for i in self.label_ids],
            "label_spans": [list(s) for s in self.label_spans],
            "params": [
                {"name": name, "shape": list(p.data.shape)} for name, p in self.params.items()
            ],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for p in self.params.values():
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "IdeaModel":
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a model checkpoint")
            size = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(size).decode("utf-8"))
            params: dict[str, Tensor] = {}
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(4 * n)
                arr = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype)
                params[entry["name"]] = Tensor(arr, requires_grad=True)
        model = cls(
            EncoderConfig(**header["encoder"]),
            header["label_names"],
            header["label_ids"],
            [tuple(s) for s in header["label_spans"]],
            ablation=AblationConfig(header["ablation"]),
            gamma_mode=header["gamma_mode"],
            dtype=dtype,
            params=params,
        )
        return model

    def copy_param_data(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_param_data(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr in snapshot.items():
            self.params[name].data[...] = arr
