"""The S4T network.

Shared patch-linear encoder, per-task projection (a 1x1 projection plus an
auxiliary predictor head), per-task main decoders, and the joint predictor:
a small transformer that attends over all tasks' (optionally masked) latent
patches at once and re-predicts every task's labels. The joint branch never
feeds the main branch; it exists to give adaptation a gradient signal.

Graphs are built per (flavor, batch, spatial extent) and cached. Flavors
expose different entry points so each stage is testable on its own:

  encode   x -> z
  project  z -> per-task latents and auxiliary predictions
  decode   per-task latents -> main predictions
  tbs      masked per-task latents -> joint predictions
  light    x -> main predictions + entropy / statistic-alignment losses
  full     x -> everything including train and adaptation losses
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from ..objectives import HEAD_EPS, build_entropy, build_task_loss, normalize_sym
from ..tensor_core import Graph, GraphBuilder, ShapeError, forward_eval, resolve_dtype
from .masking import MaskPlan, mask_bindings
from .tasks import TaskSpec, default_tasks

FLAVORS = ("encode", "project", "decode", "tbs", "light", "full")
STAT_LAYERS_PREFIX = "enc.s"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    stage_strides: tuple = (2, 2, 1)
    stage_channels: tuple = (16, 32, 32)
    task_channels: int = 16
    decoder_hidden: int = 32
    tbs_width: int = 64
    tbs_blocks: int = 2
    tbs_heads: int = 4
    tbs_mlp_ratio: int = 2
    use_tbs: bool = True
    use_projection: bool = True
    use_masking: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if len(self.stage_strides) != len(self.stage_channels):
            raise ValueError("stage_strides and stage_channels differ in length")
        if self.tbs_width % self.tbs_heads:
            raise ValueError("tbs_width must divide evenly into heads")

    @property
    def stride(self) -> int:
        return prod(self.stage_strides)

    @property
    def c_z(self) -> int:
        return self.stage_channels[-1]

    @property
    def c_t(self) -> int:
        return self.task_channels if self.use_projection else self.c_z


def param_table(cfg: ModelConfig, tasks: list, grid_p: int) -> list:
    """(name, shape, init) triples; init is 'zeros', 'ones' or ('normal', std).

    The same table drives both graph leaf declaration and initialization,
    so names and shapes cannot drift apart.
    """
    he = lambda fan: ("normal", float(np.sqrt(2.0 / fan)))
    xav = lambda fan: ("normal", float(np.sqrt(1.0 / fan)))
    emb = ("normal", 0.02)
    t = []
    c_prev = cfg.in_channels
    n_stages = len(cfg.stage_strides)
    for k, (s, c) in enumerate(zip(cfg.stage_strides, cfg.stage_channels), 1):
        fan = s * s * c_prev
        init = he(fan) if k < n_stages else xav(fan)
        t += [(f"enc.s{k}.w", (fan, c), init), (f"enc.s{k}.b", (c,), "zeros"),
              (f"enc.s{k}.g", (c,), "ones"), (f"enc.s{k}.beta", (c,), "zeros")]
        c_prev = c
    c_t = cfg.c_t
    for spec in tasks:
        ch = spec.out_channels
        if cfg.use_projection:
            t += [(f"proj.{spec.name}.w", (cfg.c_z, c_t), xav(cfg.c_z)),
                  (f"proj.{spec.name}.b", (c_t,), "zeros"),
                  (f"tp.{spec.name}.w", (c_t, ch), xav(c_t)),
                  (f"tp.{spec.name}.b", (ch,), "zeros")]
        # unit-vector heads sit behind a relu; a dead pixel would emit the
        # exact zero vector, where normalization is singular, so bias the
        # last channel off zero
        b2 = ("basis", 0.1) if spec.kind == "unit-vector-map" else "zeros"
        t += [(f"dec.{spec.name}.w1", (c_t, cfg.decoder_hidden), he(c_t)),
              (f"dec.{spec.name}.b1", (cfg.decoder_hidden,), "zeros"),
              (f"dec.{spec.name}.w2", (cfg.decoder_hidden, ch),
               xav(cfg.decoder_hidden)),
              (f"dec.{spec.name}.b2", (ch,), b2)]
    if cfg.use_tbs:
        d = cfg.tbs_width
        t += [("tbs.embed.w", (c_t, d), xav(c_t)),
              ("tbs.embed.b", (d,), "zeros"),
              ("tbs.pos", (grid_p, d), emb)]
        if cfg.use_masking:
            t += [("tbs.mask_token", (c_t,), emb)]
        for spec in tasks:
            t += [(f"tbs.taskemb.{spec.name}", (d,), emb)]
        for i in range(cfg.tbs_blocks):
            p = f"tbs.blk{i}"
            t += [(f"{p}.ln1.g", (d,), "ones"), (f"{p}.ln1.beta", (d,), "zeros")]
            for nm in ("wq", "wk", "wv", "wo"):
                t += [(f"{p}.{nm}", (d, d), xav(d))]
            # no key bias: softmax over keys cancels any constant score
            # shift, so such a parameter could never receive real gradient
            for nm in ("bq", "bv", "bo"):
                t += [(f"{p}.{nm}", (d,), "zeros")]
            t += [(f"{p}.ln2.g", (d,), "ones"), (f"{p}.ln2.beta", (d,), "zeros"),
                  (f"{p}.mlp.w1", (d, cfg.tbs_mlp_ratio * d), he(d)),
                  (f"{p}.mlp.b1", (cfg.tbs_mlp_ratio * d,), "zeros"),
                  (f"{p}.mlp.w2", (cfg.tbs_mlp_ratio * d, d),
                   xav(cfg.tbs_mlp_ratio * d)),
                  (f"{p}.mlp.b2", (d,), "zeros")]
        t += [("tbs.ln_f.g", (d,), "ones"), ("tbs.ln_f.beta", (d,), "zeros")]
        for spec in tasks:
            ch = spec.out_channels
            fan = d
            t += [(f"tbs.head.{spec.name}.w",
                   (d, cfg.stride * cfg.stride * ch), xav(fan)),
                  (f"tbs.head.{spec.name}.b",
                   (cfg.stride * cfg.stride * ch,), "zeros")]
    return t


@dataclass
class ModelGraph:
    graph: Graph
    flavor: str
    batch: int
    height: int
    width: int

    def value(self, values: list, name: str):
        return values[self.graph.outputs[name]]

    def has(self, name: str) -> bool:
        return name in self.graph.outputs


class _Builder:
    """One flavor's graph under construction."""

    def __init__(self, cfg: ModelConfig, tasks: list, batch: int,
                 height: int, width: int):
        self.cfg, self.tasks = cfg, tasks
        stride = cfg.stride
        if height % stride or width % stride:
            raise ShapeError(
                f"input extent {height}x{width} not divisible by stride {stride}")
        self.batch, self.height, self.width = batch, height, width
        self.gh, self.gw = height // stride, width // stride
        self.grid_p = self.gh * self.gw
        self.b = GraphBuilder()
        self._shapes = {name: shape
                        for name, shape, _ in param_table(cfg, tasks, self.grid_p)}
        self._declared = {}

    def par(self, name):
        if name not in self._declared:
            self._declared[name] = self.b.param(name, self._shapes[name])
        return self._declared[name]

    def _affine_ln(self, x, prefix):
        b, cfg = self.b, self.cfg
        return (b.layer_norm(x, cfg.ln_eps) * self.par(f"{prefix}.g")
                + self.par(f"{prefix}.beta"))

    def encoder(self, x):
        b, cfg = self.b, self.cfg
        cur = x
        acts = []
        n = len(cfg.stage_strides)
        for k, s in enumerate(cfg.stage_strides, 1):
            if s > 1:
                cur = b.patchify(cur, s)
            cur = cur @ self.par(f"enc.s{k}.w") + self.par(f"enc.s{k}.b")
            if k < n:
                cur = b.relu(cur)
            cur = self._affine_ln(cur, f"enc.s{k}")
            acts.append((f"{STAT_LAYERS_PREFIX}{k}", cur))
        return cur, acts

    def stat_outputs(self, acts):
        b = self.b
        for name, a in acts:
            mu = a.mean(axes=(0, 1, 2))
            centered = a - a.mean(axes=(0, 1, 2), keepdims=True)
            sd = b.sqrt(b.square(centered).mean(axes=(0, 1, 2)) + 1e-12)
            b.output(f"stats.mu.{name}", mu)
            b.output(f"stats.sd.{name}", sd)
        return acts

    def actalign_loss(self, acts):
        b = self.b
        total = None
        for name, a in acts:
            mu = a.mean(axes=(0, 1, 2))
            centered = a - a.mean(axes=(0, 1, 2), keepdims=True)
            sd = b.sqrt(b.square(centered).mean(axes=(0, 1, 2)) + 1e-12)
            src_mu = b.input(f"src_mu.{name}", mu.shape)
            src_sd = b.input(f"src_sd.{name}", sd.shape)
            term = b.abs(mu - src_mu).sum() + b.abs(sd - src_sd).sum()
            total = term if total is None else total + term
        b.output("loss.actalign", total)

    def project(self, z):
        b, cfg = self.b, self.cfg
        latents, tp = {}, {}
        for spec in self.tasks:
            if cfg.use_projection:
                zt = z @ self.par(f"proj.{spec.name}.w") \
                    + self.par(f"proj.{spec.name}.b")
                head = zt @ self.par(f"tp.{spec.name}.w") \
                    + self.par(f"tp.{spec.name}.b")
                pred = b.upsample_nearest(head, cfg.stride)
                if spec.kind == "unit-vector-map":
                    pred = normalize_sym(b, pred, HEAD_EPS)
                tp[spec.name] = pred
                b.output(f"tp.{spec.name}", pred)
            else:
                zt = z
            latents[spec.name] = zt
            b.output(f"zt.{spec.name}", zt)
        return latents, tp

    def decode(self, latents):
        b, cfg = self.b, self.cfg
        main = {}
        for spec in self.tasks:
            h = b.relu(latents[spec.name] @ self.par(f"dec.{spec.name}.w1")
                       + self.par(f"dec.{spec.name}.b1"))
            y = h @ self.par(f"dec.{spec.name}.w2") + self.par(f"dec.{spec.name}.b2")
            y = b.upsample_nearest(y, cfg.stride)
            if spec.kind == "unit-vector-map":
                y = normalize_sym(b, y, HEAD_EPS)
            main[spec.name] = y
            b.output(f"main.{spec.name}", y)
        return main

    def masked(self, latents):
        """Mask-token substitution, with the plan bound as per-task inputs."""
        b, cfg = self.b, self.cfg
        if not cfg.use_masking:
            return latents
        token = self.par("tbs.mask_token")
        out = {}
        for spec in self.tasks:
            m = b.input(f"mask.{spec.name}", (self.gh, self.gw, 1))
            z = latents[spec.name]
            out[spec.name] = z * (1.0 - m) + token * m
        return out

    def _block(self, x, prefix, n_tok):
        b, cfg = self.b, self.cfg
        d, heads = cfg.tbs_width, cfg.tbs_heads
        dh = d // heads
        h = self._affine_ln(x, f"{prefix}.ln1")

        def split(w, bias=None):
            y = h @ self.par(f"{prefix}.{w}")
            if bias is not None:
                y = y + self.par(f"{prefix}.{bias}")
            return y.reshape(self.batch, n_tok, heads, dh).transpose(0, 2, 1, 3)

        # scale on q, not on the token-by-token score matrix: same product,
        # touches far less memory
        q = split("wq", "bq") * (1.0 / np.sqrt(dh))
        k = split("wk")
        v = split("wv", "bv")
        ctx = b.softmax(q @ k.transpose(0, 1, 3, 2)) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(self.batch, n_tok, d)
        x = x + (ctx @ self.par(f"{prefix}.wo") + self.par(f"{prefix}.bo"))
        h2 = self._affine_ln(x, f"{prefix}.ln2")
        mlp = b.relu(h2 @ self.par(f"{prefix}.mlp.w1")
                     + self.par(f"{prefix}.mlp.b1"))
        mlp = mlp @ self.par(f"{prefix}.mlp.w2") + self.par(f"{prefix}.mlp.b2")
        return x + mlp

    def tbs(self, masked_latents):
        b, cfg = self.b, self.cfg
        p, d = self.grid_p, cfg.tbs_width
        toks = []
        for spec in self.tasks:
            t = masked_latents[spec.name].reshape(self.batch, p, cfg.c_t)
            e = t @ self.par("tbs.embed.w") + self.par("tbs.embed.b")
            e = e + self.par(f"tbs.taskemb.{spec.name}") + self.par("tbs.pos")
            toks.append(e)
        x = b.concat(toks, axis=1)
        n_tok = len(self.tasks) * p
        for i in range(cfg.tbs_blocks):
            x = self._block(x, f"tbs.blk{i}", n_tok)
        x = self._affine_ln(x, "tbs.ln_f")
        preds = {}
        for i, spec in enumerate(self.tasks):
            sl = b.slice_axis(x, 1, i * p, (i + 1) * p)
            sl = sl.reshape(self.batch, self.gh, self.gw, d)
            y = sl @ self.par(f"tbs.head.{spec.name}.w") \
                + self.par(f"tbs.head.{spec.name}.b")
            y = b.unpatchify(y, cfg.stride)
            if spec.kind == "unit-vector-map":
                y = normalize_sym(b, y, HEAD_EPS)
            preds[spec.name] = y
            b.output(f"tbs.{spec.name}", y)
        return preds

    def label_input(self, spec, prefix="label"):
        shape = (self.batch, self.height, self.width, spec.out_channels)
        return self.b.input(f"{prefix}.{spec.name}", shape)

    def summed_loss(self, preds, targets):
        total = None
        for spec in self.tasks:
            term = build_task_loss(self.b, spec, preds[spec.name],
                                   targets[spec.name])
            total = term if total is None else total + term
        return total

    def entropy_loss(self, main):
        b = self.b
        total = None
        for spec in self.tasks:
            if spec.kind != "categorical-map":
                continue
            term = build_entropy(b, main[spec.name])
            total = term if total is None else total + term
        if total is not None:
            b.output("loss.entropy", total)


def build_graph(cfg: ModelConfig, tasks: list, flavor: str, batch: int,
                height: int, width: int) -> ModelGraph:
    if flavor not in FLAVORS:
        raise ValueError(f"unknown flavor {flavor!r}")
    if not tasks:
        raise ValueError("task list empty")
    w = _Builder(cfg, tasks, batch, height, width)
    b = w.b

    if flavor == "encode":
        x = b.input("x", (batch, height, width, cfg.in_channels))
        z, acts = w.encoder(x)
        b.output("z", z)
        w.stat_outputs(acts)
    elif flavor == "project":
        z = b.input("z", (batch, w.gh, w.gw, cfg.c_z))
        w.project(z)
    elif flavor == "decode":
        latents = {spec.name: b.input(f"zt.{spec.name}",
                                      (batch, w.gh, w.gw, cfg.c_t))
                   for spec in tasks}
        w.decode(latents)
    elif flavor == "tbs":
        if not cfg.use_tbs:
            raise ValueError("joint predictor disabled in this config")
        masked = {spec.name: b.input(f"ztilde.{spec.name}",
                                     (batch, w.gh, w.gw, cfg.c_t))
                  for spec in tasks}
        w.tbs(masked)
    else:
        x = b.input("x", (batch, height, width, cfg.in_channels))
        z, acts = w.encoder(x)
        b.output("z", z)
        w.stat_outputs(acts)
        w.actalign_loss(acts)
        latents, tp = w.project(z)
        main = w.decode(latents)
        w.entropy_loss(main)
        if flavor == "full":
            labels = {spec.name: w.label_input(spec) for spec in tasks}
            loss_main = w.summed_loss(main, labels)
            b.output("loss.main", loss_main)
            lam_tbs = b.input("lam.tbs", ())
            lam_tp = b.input("lam.tp", ())
            if cfg.use_projection:
                loss_tp = w.summed_loss(tp, labels)
            else:
                loss_tp = b.const(0.0)
            b.output("loss.tp", loss_tp)
            if cfg.use_tbs:
                tbs_preds = w.tbs(w.masked(latents))
                loss_tbs = w.summed_loss(tbs_preds, labels)
                b.output("loss.tbs_label", loss_tbs)
                lam_ttt = b.input("lam.ttt", ())
                pseudo = {spec.name: w.label_input(spec, "pseudo")
                          for spec in tasks}
                ttt_total = None
                for spec in tasks:
                    term = build_task_loss(b, spec, tbs_preds[spec.name],
                                           pseudo[spec.name])
                    b.output(f"loss.ttt.{spec.name}", lam_ttt * term)
                    ttt_total = term if ttt_total is None else ttt_total + term
                b.output("loss.ttt", lam_ttt * ttt_total)
            else:
                loss_tbs = b.const(0.0)
                b.output("loss.tbs_label", loss_tbs)
            total = loss_main + lam_tbs * loss_tbs + lam_tp * loss_tp
            b.output("loss.total", total)

    return ModelGraph(b.finalize(), flavor, batch, height, width)


class S4TModel:
    """Stateless architecture object: builds graphs, initializes and runs."""

    def __init__(self, cfg: ModelConfig = None, tasks: list = None):
        self.cfg = cfg if cfg is not None else ModelConfig()
        self.tasks = list(tasks) if tasks is not None else default_tasks()
        if not self.tasks:
            raise ValueError("task list empty")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate task names")
        self._graphs = {}
        self._zeros = {}

    # -- construction ------------------------------------------------------

    def graph(self, flavor: str, batch: int, height: int, width: int
              ) -> ModelGraph:
        key = (flavor, batch, height, width)
        if key not in self._graphs:
            self._graphs[key] = build_graph(self.cfg, self.tasks, flavor,
                                            batch, height, width)
        return self._graphs[key]

    def grid_hw(self, spatial: tuple) -> tuple:
        s = self.cfg.stride
        return (spatial[0] // s, spatial[1] // s)

    def init_params(self, seed: int, spatial: tuple = (32, 32),
                    dtype="f32") -> dict:
        dt = resolve_dtype(dtype)
        gh, gw = self.grid_hw(spatial)
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape, init in param_table(self.cfg, self.tasks, gh * gw):
            if init == "zeros":
                v = np.zeros(shape)
            elif init == "ones":
                v = np.ones(shape)
            elif init[0] == "basis":
                v = np.zeros(shape)
                v[..., -1] = init[1]
            else:
                v = rng.normal(0.0, init[1], size=shape)
            params[name] = v.astype(dt)
        return params

    def zero_bindings(self, mg: ModelGraph) -> dict:
        """Neutral values for every input: zero arrays, default weights."""
        key = id(mg.graph)
        if key not in self._zeros:
            zeros = {}
            for name, idx in mg.graph.inputs.items():
                shape = mg.graph.shape_of(idx)
                if name == "lam.tbs" or name == "lam.tp":
                    zeros[name] = np.ones((), dtype=np.float32)
                elif name == "lam.ttt":
                    zeros[name] = np.full((), 0.01, dtype=np.float32)
                else:
                    zeros[name] = np.zeros(shape, dtype=np.float32)
            self._zeros[key] = zeros
        return self._zeros[key]

    # -- stage operations ----------------------------------------------------

    def encode(self, params: dict, x: np.ndarray) -> np.ndarray:
        mg = self.graph("encode", *x.shape[:3])
        vals = forward_eval(mg.graph, {**params, "x": x})
        return mg.value(vals, "z")

    def project_and_predict(self, params: dict, z: np.ndarray):
        batch, gh, gw, _ = z.shape
        s = self.cfg.stride
        mg = self.graph("project", batch, gh * s, gw * s)
        vals = forward_eval(mg.graph, {**params, "z": z})
        latents = {t.name: mg.value(vals, f"zt.{t.name}") for t in self.tasks}
        if self.cfg.use_projection:
            tp = {t.name: mg.value(vals, f"tp.{t.name}") for t in self.tasks}
        else:
            tp = None
        return latents, tp

    def decode_main(self, params: dict, latents: dict) -> dict:
        first = latents[self.tasks[0].name]
        batch, gh, gw, _ = first.shape
        s = self.cfg.stride
        mg = self.graph("decode", batch, gh * s, gw * s)
        bind = {**params}
        for t in self.tasks:
            bind[f"zt.{t.name}"] = latents[t.name]
        vals = forward_eval(mg.graph, bind)
        return {t.name: mg.value(vals, f"main.{t.name}") for t in self.tasks}

    def tbs_predict(self, params: dict, masked_latents: dict) -> dict:
        first = masked_latents[self.tasks[0].name]
        batch, gh, gw, _ = first.shape
        s = self.cfg.stride
        mg = self.graph("tbs", batch, gh * s, gw * s)
        bind = {**params}
        for t in self.tasks:
            bind[f"ztilde.{t.name}"] = masked_latents[t.name]
        vals = forward_eval(mg.graph, bind)
        return {t.name: mg.value(vals, f"tbs.{t.name}") for t in self.tasks}

    def tbs_outputs(self, params: dict, x: np.ndarray, plan: MaskPlan) -> dict:
        """Joint predictions for a whole image batch under a mask plan."""
        mg = self.graph("full", *x.shape[:3])
        bind = {**self.zero_bindings(mg), **params, "x": x}
        if self.cfg.use_masking:
            bind.update(mask_bindings(plan, [t.name for t in self.tasks]))
        vals = forward_eval(mg.graph, bind)
        return {t.name: mg.value(vals, f"tbs.{t.name}") for t in self.tasks}

    # -- analysis -------------------------------------------------------------

    @staticmethod
    def task_affinity(latents: dict):
        """Cosine similarities between space-and-batch-averaged latents.

        Returns (matrix, flagged): flagged lists tasks whose mean latent has
        zero norm; their rows and columns are defined as 0.
        """
        names = list(latents)
        means = [np.asarray(latents[n], dtype=np.float64).mean(axis=(0, 1, 2))
                 for n in names]
        norms = [float(np.linalg.norm(m)) for m in means]
        n = len(names)
        mat = np.zeros((n, n))
        flagged = [names[i] for i in range(n) if norms[i] < 1e-12]
        for i in range(n):
            for j in range(n):
                if norms[i] < 1e-12 or norms[j] < 1e-12:
                    continue
                if i == j:
                    mat[i, j] = 1.0
                else:
                    mat[i, j] = float(means[i] @ means[j] / (norms[i] * norms[j]))
        return mat, flagged

    def scope_params(self, scope: str) -> list:
        """Parameter names updated at test time for a given scope."""
        all_names = [name for name, _, _ in
                     param_table(self.cfg, self.tasks, 1)]
        if scope == "all":
            return all_names
        if scope == "encoder+proj+tbs":
            return [n for n in all_names
                    if n.startswith(("enc.", "proj.", "tp.", "tbs."))]
        if scope == "encoder-only":
            return [n for n in all_names if n.startswith("enc.")]
        raise ValueError(f"unknown update scope {scope!r}")
