"""Scikit-learn style continual classifier wrapping both branches.

Each call to :meth:`PromptFusionClassifier.partial_fit` trains one task.
``classes_`` lists the classes in arrival order, which is also the column
order of :meth:`decision_function`.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import gradcore as gc
from ._validation import check_images, check_labels
from .booster import Booster
from .encoders import TextEncoder, VisionEncoder
from .fusion import FusionParams, MaskMode, fuse, gated_fuse
from .gate import Gate
from .optim import AdamW, cosine_lr
from .rehearsal import ClassFeatureStats, ExemplarBuffer
from .stabilizer import Stabilizer, StabilizerPromptBank, argmax_lowest_id

VARIANTS = ("promptfusion", "stabilizer", "booster")
REHEARSAL_MODES = ("none", "buffer", "gaussian")
_EVAL_CHUNK = 256

# spawn keys for the per-task random streams
_SHUFFLE, _GUMBEL, _BUFFER, _FEATURES = 1, 2, 3, 4


class PromptFusionClassifier(ClassifierMixin, BaseEstimator):
    """Stabilizer + Booster continual learner with optional Booster gating.

    Parameters mirror the run configuration. ``variant`` picks the full fused
    model or a single branch; ``gate=True`` turns the fused model into the
    Lite variant. ``mask_mode="auto"`` uses the rehearsal mask with an
    exemplar buffer and the memory-free mask otherwise.
    """

    def __init__(self, variant="promptfusion", gate=False, scenario="class",
                 text_prompt_length=8, booster_prompt_length=8, image_prompt_length=8,
                 vision_width=32, text_width=32, depth=2, n_heads=4, patch_size=4,
                 share_encoder=False, temperature=0.07, prompt_init_std=0.02, encoder_seed=0,
                 mask_mode="auto", use_mask=True, use_lambda=True, mask_at_inference=True,
                 gate_tau=1.0, gate_rho=0.5, gate_zeta=0.1, gate_delta=1.0, gate_hidden=64,
                 gate_feature="stabilizer",
                 rehearsal="none", buffer_capacity=200, feature_samples_per_class=32,
                 finetune_steps=20, finetune_lr=None,
                 learning_rate=0.002, weight_decay=1e-4, schedule="cosine", epochs=3,
                 batch_size=32, dtype="float32", random_state=0):
        self.variant = variant
        self.gate = gate
        self.scenario = scenario
        self.text_prompt_length = text_prompt_length
        self.booster_prompt_length = booster_prompt_length
        self.image_prompt_length = image_prompt_length
        self.vision_width = vision_width
        self.text_width = text_width
        self.depth = depth
        self.n_heads = n_heads
        self.patch_size = patch_size
        self.share_encoder = share_encoder
        self.temperature = temperature
        self.prompt_init_std = prompt_init_std
        self.encoder_seed = encoder_seed
        self.mask_mode = mask_mode
        self.use_mask = use_mask
        self.use_lambda = use_lambda
        self.mask_at_inference = mask_at_inference
        self.gate_tau = gate_tau
        self.gate_rho = gate_rho
        self.gate_zeta = gate_zeta
        self.gate_delta = gate_delta
        self.gate_hidden = gate_hidden
        self.gate_feature = gate_feature
        self.rehearsal = rehearsal
        self.buffer_capacity = buffer_capacity
        self.feature_samples_per_class = feature_samples_per_class
        self.finetune_steps = finetune_steps
        self.finetune_lr = finetune_lr
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.dtype = dtype
        self.random_state = random_state

    # -- construction ------------------------------------------------------
    def _validate_params(self) -> None:
        errors = []
        if self.variant not in VARIANTS:
            errors.append(f"variant must be one of {VARIANTS}")
        if self.gate and self.variant != "promptfusion":
            errors.append("the gate only applies to the promptfusion variant")
        if self.scenario not in ("class", "domain"):
            errors.append("scenario must be 'class' or 'domain'")
        if self.rehearsal not in REHEARSAL_MODES:
            errors.append(f"rehearsal must be one of {REHEARSAL_MODES}")
        if self.mask_mode not in ("auto", "rehearsal", "memory_free"):
            errors.append("mask_mode must be auto, rehearsal or memory_free")
        if self.gate_feature not in ("stabilizer", "plain"):
            errors.append("gate_feature must be 'stabilizer' or 'plain'")
        if self.schedule not in ("cosine", "constant"):
            errors.append("schedule must be 'cosine' or 'constant'")
        for name in ("vision_width", "text_width", "depth", "n_heads", "patch_size", "epochs",
                     "batch_size", "buffer_capacity", "gate_hidden"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name} must be positive")
        for name in ("text_prompt_length", "booster_prompt_length", "image_prompt_length",
                     "finetune_steps", "feature_samples_per_class"):
            if int(getattr(self, name)) < 0:
                errors.append(f"{name} must be non-negative")
        if self.learning_rate < 0 or self.weight_decay < 0:
            errors.append("learning_rate and weight_decay must be non-negative")
        if errors:
            raise ValueError("invalid parameters: " + "; ".join(errors))

    @property
    def _np_dtype(self):
        return np.dtype(self.dtype).type

    def _resolved_mask_mode(self) -> MaskMode:
        if self.mask_mode == "auto":
            return MaskMode.REHEARSAL if self.rehearsal == "buffer" else MaskMode.MEMORY_FREE
        return MaskMode(self.mask_mode)

    def _build(self, image_shape, n_table: int) -> None:
        size, size_w, channels = image_shape
        if size != size_w:
            raise ValueError(f"square images required, got {size}x{size_w}")
        dt = self._np_dtype
        seed = self.encoder_seed
        self.stabilizer_ = None
        self.booster_ = None
        self.gate_ = None
        uses_stab = self.variant in ("promptfusion", "stabilizer")
        uses_boost = self.variant in ("promptfusion", "booster")
        stab_vision = None
        if uses_stab:
            stab_vision = VisionEncoder(size, self.patch_size, channels, self.vision_width, self.depth,
                                        self.n_heads, out_dim=self.text_width, seed=[seed, 1], dtype=dt)
            text = TextEncoder(n_table, self.text_width, self.depth, self.n_heads,
                               max_context=max(self.text_prompt_length, 1), seed=[seed, 2], dtype=dt)
            bank = StabilizerPromptBank(self.text_prompt_length, self.text_width, self.image_prompt_length,
                                        self.vision_width, self.temperature, self.prompt_init_std,
                                        domain_incremental=self.scenario == "domain",
                                        seed=self.random_state, dtype=dt)
            self.stabilizer_ = Stabilizer(stab_vision, text, bank)
        if uses_boost:
            if self.share_encoder and stab_vision is not None and stab_vision.proj is None:
                boost_vision = stab_vision
            else:
                boost_vision = VisionEncoder(size, self.patch_size, channels, self.vision_width, self.depth,
                                             self.n_heads, seed=[seed, 3], dtype=dt)
            self.booster_ = Booster(boost_vision, self.booster_prompt_length, self.prompt_init_std,
                                    seed=self.random_state, dtype=dt)
        self.fusion_ = FusionParams(self._resolved_mask_mode(), self.use_mask, self.use_lambda, dtype=dt)
        if self.gate:
            self.gate_ = Gate(self.text_width, self.gate_hidden, self.gate_tau, self.gate_rho,
                              self.gate_zeta, self.gate_delta, seed=self.random_state, dtype=dt)
        self.buffer_ = ExemplarBuffer(self.buffer_capacity, seed=self.random_state) \
            if self.rehearsal == "buffer" else None
        self.stats_ = ClassFeatureStats() if self.rehearsal == "gaussian" else None
        self.classes_ = np.zeros(0, dtype=np.int64)
        self.n_tasks_ = 0
        self.image_shape_ = tuple(image_shape)
        self.class_table_size_ = n_table
        self.last_decisions_ = None
        self.loss_history_ = []

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.random_state, self.n_tasks_, stream])

    # -- forward -----------------------------------------------------------
    def _positions(self, y: np.ndarray) -> np.ndarray:
        lookup = {int(c): i for i, c in enumerate(self.classes_)}
        try:
            return np.array([lookup[int(c)] for c in y], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} is not among the seen classes") from None

    def _gate_inputs(self, images, stab_features: gc.Value) -> np.ndarray:
        if self.gate_feature == "plain":
            return self.stabilizer_.vision.gate_feature(images)
        return stab_features.data

    def _logits(self, images: np.ndarray, training: bool, rng=None) -> tuple[gc.Value, dict]:
        """Model output ``z`` plus the auxiliary terms the Lite loss needs."""
        aux: dict = {}
        if self.variant == "stabilizer":
            return self.stabilizer_.logits(images), aux
        if self.variant == "booster":
            return self.booster_.logits(images), aux
        W = self.fusion_.mask() if (training or self.mask_at_inference) else None
        lam = self.fusion_.weight()
        stab_feats = self.stabilizer_.image_features(images)
        S = self.stabilizer_.logits(image_features=stab_feats)
        if self.gate_ is None:
            return fuse(S, self.booster_.logits(images), lam, W), aux
        v = self._gate_inputs(images, stab_feats)
        if training:
            _, hard, decisions = self.gate_.gumbel_decision(v, rng)
            aux["use"] = decisions[:, 0]
            aux["gate_input"] = v
        else:
            hard = decisions = self.gate_.decide(v)
        aux["hard"] = hard
        return gated_fuse(S, self.booster_.logits, images, decisions, lam, W, dense=training), aux

    def _loss(self, images, positions, rng) -> gc.Value:
        z, aux = self._logits(images, training=True, rng=rng)
        loss = gc.cross_entropy(z, positions, reduction="sum")
        if self.gate_ is not None:
            loss = loss + self.gate_.usage_penalty(aux["use"])
            if self.gate_delta:
                loss = loss + self.gate_.delta * self.gate_.distillation(aux["gate_input"])
        return loss

    def _trainable(self) -> list[gc.Value]:
        params = []
        if self.stabilizer_ is not None:
            params += self.stabilizer_.bank.trainable()
        if self.booster_ is not None:
            params += self.booster_.trainable()
        if self.variant == "promptfusion":
            params += self.fusion_.trainable()
        if self.gate_ is not None:
            params += self.gate_.trainable()
        return params

    # -- training ------------------------------------------------------------
    def partial_fit(self, X, y, classes=None, sample_keys=None):
        """Train on one task.

        ``classes`` (first call only) lists every class id the stream will
        use, sizing the frozen class-embedding table. ``sample_keys`` name the
        items for the exemplar buffer; default is the row index.
        """
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        first = not hasattr(self, "n_tasks_")
        if first:
            self._validate_params()
            table = np.unique(y) if classes is None else np.asarray(classes, dtype=np.int64)
            self._build(X.shape[1:], int(table.max()) + 1)
        elif X.shape[1:] != self.image_shape_:
            raise ValueError(f"image shape {X.shape[1:]} differs from {self.image_shape_}")
        if y.max() >= self.class_table_size_:
            raise ValueError(f"class id {int(y.max())} outside the table of {self.class_table_size_} classes")
        keys = np.arange(X.shape[0]) if sample_keys is None else np.asarray(sample_keys, dtype=np.int64)
        self._begin_task(np.unique(y))
        self._train_task(X, y)
        self._end_task(X, y, keys)
        return self

    def fit(self, X, y):
        """Train from scratch on a single task."""
        for attr in [a for a in vars(self) if a.endswith("_") and not a.startswith("__")]:
            delattr(self, attr)
        return self.partial_fit(X, y)

    def _begin_task(self, task_classes: np.ndarray) -> None:
        task_classes = np.sort(task_classes)
        seen = set(self.classes_.tolist())
        new = [int(c) for c in task_classes if int(c) not in seen]
        if self.scenario == "class" and len(new) != task_classes.size:
            raise ValueError(f"classes {sorted(set(task_classes.tolist()) & seen)} were already learned")
        n_old = self.classes_.size
        self.n_tasks_ += 1
        self.classes_ = np.concatenate([self.classes_, np.asarray(new, dtype=np.int64)])
        if self.stabilizer_ is not None:
            self.stabilizer_.begin_task(task_classes)
        if self.booster_ is not None and new:
            self.booster_.extend_head(len(new))
        if new:
            self.fusion_.begin_task(self.n_tasks_, n_old, len(new))
        else:
            self.fusion_.task_index = self.n_tasks_
        if self.gate_ is not None:
            self.gate_.begin_task()

    def _train_task(self, X: np.ndarray, y: np.ndarray) -> None:
        if self.buffer_ is not None and len(self.buffer_):
            bx, by = self.buffer_.arrays()
            X, y = np.concatenate([X, bx.astype(X.dtype)]), np.concatenate([y, by])
        pos = self._positions(y)
        n = X.shape[0]
        bs = min(int(self.batch_size), n)
        steps_per_epoch = -(-n // bs)
        total = steps_per_epoch * int(self.epochs)
        opt = AdamW(self._trainable(), self.learning_rate, weight_decay=self.weight_decay)
        shuffle, gumbel = self._rng(_SHUFFLE), self._rng(_GUMBEL)
        step = 0
        self.lr_trace_ = []
        for _ in range(int(self.epochs)):
            order = shuffle.permutation(n)
            for b in range(steps_per_epoch):
                idx = order[b * bs:(b + 1) * bs]
                lr = cosine_lr(self.learning_rate, step, total) if self.schedule == "cosine" else self.learning_rate
                opt.zero_grad()
                loss = self._loss(X[idx], pos[idx], gumbel)
                loss.backward()
                opt.step(lr)
                self.lr_trace_.append(lr)
                self.loss_history_.append(float(loss.data))
                step += 1

    def _end_task(self, X: np.ndarray, y: np.ndarray, keys: np.ndarray) -> None:
        if self.stats_ is not None:
            feats = self.branch_features(X)
            for branch, f in feats.items():
                self.stats_.record(f, y, branch)
            self._feature_finetune()
        if self.stabilizer_ is not None:
            self.stabilizer_.bank.freeze(self.stabilizer_.bank.n_tasks - 1)
        if self.gate_ is not None:
            self.gate_.end_task()
            self.gate_.snapshot()
        if self.buffer_ is not None:
            self.buffer_.update(X, y, keys, self._rng(_BUFFER))

    def _feature_finetune(self) -> None:
        """Refit heads on features sampled from the recorded class Gaussians.

        The sampled features sit downstream of the visual prompts, so only the
        current text prompts, the Booster head and the fusion parameters move.
        """
        steps = int(self.finetune_steps)
        if steps == 0 or self.feature_samples_per_class == 0:
            return
        params = []
        if self.stabilizer_ is not None:
            params.append(self.stabilizer_.bank.current())
        if self.booster_ is not None:
            params += [self.booster_.head_w, self.booster_.head_b]
        if self.variant == "promptfusion":
            params += self.fusion_.trainable()
        lr = self.learning_rate if self.finetune_lr is None else self.finetune_lr
        opt = AdamW(params, lr, weight_decay=self.weight_decay)
        rng = self._rng(_FEATURES)
        for _ in range(steps):
            opt.zero_grad()
            loss = self.feature_loss(self._sample_features(rng))
            loss.backward()
            opt.step(lr)

    def _sample_features(self, rng) -> dict[str, np.ndarray]:
        out = {}
        n = int(self.feature_samples_per_class)
        for branch in self.stats_.branches():
            out[branch], out["labels"] = self.stats_.sample(self.classes_, n, rng, branch, self._np_dtype)
        return out

    def feature_loss(self, sampled: dict[str, np.ndarray]) -> gc.Value:
        """Cross-entropy of the fused output computed from branch features directly."""
        pos = self._positions(sampled["labels"])
        S = B = None
        if self.stabilizer_ is not None:
            f = sampled["stabilizer"]
            if f.shape[1] != self.stabilizer_.vision.out_dim:
                raise ValueError(f"stabilizer features have dim {f.shape[1]}")
            S = self.stabilizer_.logits(image_features=gc.Value(f))
        if self.booster_ is not None:
            f = sampled["booster"]
            if f.shape[1] != self.booster_.vision.out_dim:
                raise ValueError(f"booster features have dim {f.shape[1]}")
            B = self.booster_.head(gc.Value(f))
        z = S if B is None else B if S is None else self.fusion_.fuse(S, B)
        return gc.cross_entropy(z, pos, reduction="sum")

    # -- inference ---------------------------------------------------------------
    def branch_features(self, X) -> dict[str, np.ndarray]:
        """Pooled features of each active branch (stabilizer with image prompts)."""
        check_is_fitted(self, "n_tasks_")
        X = check_images(X)
        out: dict[str, list] = {}
        with gc.no_grad():
            for s in range(0, X.shape[0], _EVAL_CHUNK):
                xb = X[s:s + _EVAL_CHUNK]
                if self.stabilizer_ is not None:
                    out.setdefault("stabilizer", []).append(self.stabilizer_.image_features(xb).data)
                if self.booster_ is not None:
                    n0 = self.booster_.n_evaluated
                    out.setdefault("booster", []).append(self.booster_.features(xb).data)
                    self.booster_.n_evaluated = n0
        return {k: np.concatenate(v) for k, v in out.items()}

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "n_tasks_")
        X = check_images(X)
        chunks, decisions = [], []
        with gc.no_grad():
            for s in range(0, X.shape[0], _EVAL_CHUNK):
                z, aux = self._logits(X[s:s + _EVAL_CHUNK], training=False)
                chunks.append(z.data)
                if "hard" in aux:
                    decisions.append(aux["hard"][:, 0].astype(np.int8))
        self.last_decisions_ = np.concatenate(decisions) if decisions else None
        return np.concatenate(chunks)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return argmax_lowest_id(self.decision_function(X), self.classes_)

    # -- persistence ---------------------------------------------------------------
    def get_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        """Everything needed to continue the run at a task boundary.

        Returns ``(meta, tensors)``: ``meta`` is JSON-serialisable, ``tensors``
        maps names to arrays in the model dtype. Optimiser moments are not
        kept because every task starts a fresh optimiser.
        """
        check_is_fitted(self, "n_tasks_")
        meta: dict = {
            "params": self.get_params(),
            "image_shape": list(self.image_shape_),
            "class_table_size": self.class_table_size_,
            "classes": self.classes_.tolist(),
            "n_tasks": self.n_tasks_,
            "loss_history": list(self.loss_history_),
        }
        tensors: dict[str, np.ndarray] = {}
        if self.stabilizer_ is not None:
            bank = self.stabilizer_.bank
            meta["stabilizer"] = {"task_classes": [c.tolist() for c in bank.task_classes],
                                  "frozen": list(bank.frozen)}
            for t, p in enumerate(bank.prompts):
                tensors[f"stabilizer/prompts/{t}"] = p.data
            tensors["stabilizer/image_prompts"] = bank.image_prompts.data
        if self.booster_ is not None:
            meta["booster"] = {"extensions": [list(e) for e in self.booster_.extensions]}
            tensors["booster/prompts"] = self.booster_.prompts.data
            tensors["booster/head_w"] = self.booster_.head_w.data
            tensors["booster/head_b"] = self.booster_.head_b.data
        meta["fusion"] = {"task_index": self.fusion_.task_index}
        tensors["fusion/lambda"] = self.fusion_.lam.data
        tensors["fusion/alpha"] = self.fusion_.alpha.data
        tensors["fusion/beta"] = self.fusion_.beta.data
        if self.gate_ is not None:
            meta["gate"] = {"phase": self.gate_._phase, "has_snapshot": self.gate_.frozen_params is not None}
            for k, v in self.gate_.params.items():
                tensors[f"gate/F/{k}"] = v.data
            for k, v in (self.gate_.frozen_params or {}).items():
                tensors[f"gate/F_prev/{k}"] = v
        if self.buffer_ is not None:
            meta["buffer"] = self.buffer_.state()
        if self.stats_ is not None:
            meta["stats"] = self.stats_.state()
            tensors.update(self.stats_.tensors())
        return meta, tensors

    def set_state(self, meta: dict, tensors: dict[str, np.ndarray], image_lookup=None):
        """Restore from :meth:`get_state`.

        ``image_lookup(keys)`` must return the images stored under the given
        sample keys; it is required when the state holds an exemplar buffer.
        """
        self.set_params(**meta["params"])
        self._validate_params()
        self._build(tuple(meta["image_shape"]), int(meta["class_table_size"]))
        dt = self._np_dtype

        def arr(name):
            return np.array(tensors[name], dtype=dt)

        self.classes_ = np.asarray(meta["classes"], dtype=np.int64)
        self.n_tasks_ = int(meta["n_tasks"])
        self.loss_history_ = list(meta["loss_history"])
        if self.stabilizer_ is not None:
            bank = self.stabilizer_.bank
            info = meta["stabilizer"]
            bank.prompts, bank.task_classes, bank.frozen = [], [], []
            for t, (cls, frozen) in enumerate(zip(info["task_classes"], info["frozen"])):
                bank.prompts.append(gc.Value(arr(f"stabilizer/prompts/{t}"), requires_grad=not frozen,
                                             name=f"stabilizer.prompts.{t}"))
                bank.task_classes.append(np.asarray(cls, dtype=np.int64))
                bank.frozen.append(bool(frozen))
            bank.image_prompts.data = arr("stabilizer/image_prompts")
        if self.booster_ is not None:
            self.booster_.prompts.data = arr("booster/prompts")
            self.booster_.head_w = gc.Value(arr("booster/head_w"), requires_grad=True, name="booster.head_w")
            self.booster_.head_b = gc.Value(arr("booster/head_b"), requires_grad=True, name="booster.head_b")
            self.booster_.extensions = [tuple(e) for e in meta["booster"]["extensions"]]
        fusion = self.fusion_
        fusion.task_index = int(meta["fusion"]["task_index"])
        fusion.lam.data = arr("fusion/lambda").reshape(())
        fusion.alpha = gc.Value(arr("fusion/alpha"), requires_grad=self.use_mask, name="fusion.alpha")
        fusion.beta = gc.Value(arr("fusion/beta"), requires_grad=self.use_mask, name="fusion.beta")
        if self.gate_ is not None:
            for k, v in self.gate_.params.items():
                v.data = arr(f"gate/F/{k}")
            if meta["gate"]["has_snapshot"]:
                self.gate_.frozen_params = {k: arr(f"gate/F_prev/{k}") for k in self.gate_.params}
            self.gate_._phase = meta["gate"]["phase"]
        if self.buffer_ is not None:
            if image_lookup is None:
                raise ValueError("restoring an exemplar buffer needs an image lookup")
            self.buffer_.restore(meta["buffer"], image_lookup)
        if self.stats_ is not None:
            self.stats_.restore(meta["stats"], tensors)
        return self
