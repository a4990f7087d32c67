"""The composition model: two human modules, an object module, a composition
decoder, and every latent code table, addressed through one parameter bag.

Module roles:
- ``target``: generative human module trained on the varied-identity set;
  carries the hybrid occupancy + signed-distance heads and the deformer that
  every later stage inherits.
- ``source``: human module for the single captured identity (occupancy only);
  its skinning net starts from the target deformer, the warp net is shared
  outright and stays frozen.
- ``object``: occupancy-only module for residual geometry; its codes carry a
  frozen 5-bit category prefix.
- ``composer``: decoder fusing human/object penultimate features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .articulation import SkinningNet, WarpNet
from .checkpoint import load_checkpoint, save_checkpoint
from .fields import (
    CanonicalBBox,
    CompositionDecoder,
    GeneratorConfig,
    OccupancyDecoder,
    SdfDecoder,
    TriplaneGenerator,
)
from .nn import ParamBag
from .synthbody import CATEGORIES

LATENT_DIM = 64
CATEGORY_BITS = 5
FREE_BITS = LATENT_DIM - CATEGORY_BITS


@dataclass(frozen=True)
class ModelConfig:
    human_gen: GeneratorConfig = GeneratorConfig()
    object_gen: GeneratorConfig = GeneratorConfig(channels=(16, 8, 8, 64))
    bbox: CanonicalBBox = CanonicalBBox()
    n_th: int = 52
    n_sh: int = 18
    n_sh_plus_o: int = 34
    init_seed: int = 202

    @property
    def n_stage3_sh(self) -> int:
        return self.n_sh + self.n_sh_plus_o


class HumanModule:
    def __init__(self, bag: ParamBag, name: str, rng, gen_config: GeneratorConfig,
                 with_sdf: bool, warp: WarpNet | None = None):
        self.name = name
        self.gen = TriplaneGenerator(bag, f"{name}/gen", rng, gen_config)
        self.occ = OccupancyDecoder(bag, f"{name}/occ", rng)
        self.sdf = SdfDecoder(bag, f"{name}/sdf", rng) if with_sdf else None
        self.skin = SkinningNet(bag, f"{name}/skin", rng)
        self.warp = warp if warp is not None else WarpNet(bag, f"{name}/warp", rng)


class ObjectModule:
    def __init__(self, bag: ParamBag, name: str, rng, gen_config: GeneratorConfig):
        self.name = name
        self.gen = TriplaneGenerator(bag, f"{name}/gen", rng, gen_config)
        self.occ = OccupancyDecoder(bag, f"{name}/occ", rng)


class CompositionModel:
    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        self.bag = ParamBag()
        rng = np.random.default_rng(config.init_seed)
        self.target = HumanModule(self.bag, "target", rng, config.human_gen, with_sdf=True)
        # the source module reuses the target warp net (frozen after stage 1)
        self.source = HumanModule(self.bag, "source", rng, config.human_gen, with_sdf=False,
                                  warp=self.target.warp)
        self.object = ObjectModule(self.bag, "object", rng, config.object_gen)
        self.composer = CompositionDecoder(self.bag, "composer", rng)

        # latent code tables; all zero-initialized
        self.z_th = self.bag.add("codes/z_th", np.zeros((config.n_th, LATENT_DIM)))
        self.z_sh = self.bag.add("codes/z_sh", np.zeros((config.n_sh, LATENT_DIM)))
        self.z_sh3 = self.bag.add("codes/z_sh3", np.zeros((config.n_stage3_sh, LATENT_DIM)))
        self.z_o_free = self.bag.add("codes/z_o_free", np.zeros((config.n_sh_plus_o, FREE_BITS)))
        self.z_o_prefix = self.bag.add(
            "codes/z_o_prefix", np.zeros((config.n_sh_plus_o, CATEGORY_BITS)), trainable=False
        )
        self.z_emp = self.bag.add("codes/z_emp", np.zeros(LATENT_DIM))
        self.z_sh_anchor = self.bag.add("codes/z_sh_anchor", np.zeros(LATENT_DIM), trainable=False)

    def set_object_categories(self, category_indices):
        onehot = np.zeros((self.config.n_sh_plus_o, CATEGORY_BITS))
        for i, c in enumerate(category_indices):
            onehot[i, c] = 1.0
        self.z_o_prefix.data = onehot

    def z_o_row(self, idx: int) -> Tensor:
        """Frozen category prefix concatenated with the trainable remainder."""
        free = ad.reshape(ad.gather_rows(self.z_o_free, np.array([idx])), (FREE_BITS,))
        prefix = Tensor(self.z_o_prefix.data[idx])
        return ad.concat([prefix, free], axis=0)

    def z_o_value(self, idx: int) -> np.ndarray:
        return np.concatenate([self.z_o_prefix.data[idx], self.z_o_free.data[idx]])

    def z_row(self, table: Tensor, idx: int) -> Tensor:
        return ad.reshape(ad.gather_rows(table, np.array([idx])), (LATENT_DIM,))

    # ------------------------------------------------------------------
    # persistence

    def state_arrays(self) -> dict:
        return self.bag.state_arrays()

    def save(self, path, extra: dict | None = None):
        arrays = dict(self.state_arrays())
        meta = {
            "meta/n_th": np.array([float(self.config.n_th)]),
            "meta/n_sh": np.array([float(self.config.n_sh)]),
            "meta/n_sh_plus_o": np.array([float(self.config.n_sh_plus_o)]),
            "meta/human_channels": np.asarray(self.config.human_gen.channels, dtype=np.float64),
            "meta/object_channels": np.asarray(self.config.object_gen.channels, dtype=np.float64),
            "meta/human_base": np.array([float(self.config.human_gen.base_channels),
                                         float(self.config.human_gen.base_res)]),
            "meta/object_base": np.array([float(self.config.object_gen.base_channels),
                                          float(self.config.object_gen.base_res)]),
            "meta/stage": np.array([0.0]),
        }
        meta.update(extra or {})
        arrays.update(meta)
        save_checkpoint(path, arrays)

    def load(self, path) -> dict:
        arrays = load_checkpoint(path)
        self.bag.load_state_arrays(arrays, strict=True)
        return {k: v for k, v in arrays.items() if k.startswith(("meta/", "adam/"))}

    @classmethod
    def from_checkpoint(cls, path) -> tuple["CompositionModel", dict]:
        arrays = load_checkpoint(path)

        def tup(key):
            return tuple(int(v) for v in arrays[key])

        hb = arrays["meta/human_base"]
        ob = arrays["meta/object_base"]
        config = ModelConfig(
            human_gen=GeneratorConfig(base_channels=int(hb[0]), base_res=int(hb[1]),
                                      channels=tup("meta/human_channels")),
            object_gen=GeneratorConfig(base_channels=int(ob[0]), base_res=int(ob[1]),
                                       channels=tup("meta/object_channels")),
            n_th=int(arrays["meta/n_th"][0]),
            n_sh=int(arrays["meta/n_sh"][0]),
            n_sh_plus_o=int(arrays["meta/n_sh_plus_o"][0]),
        )
        model = cls(config)
        model.bag.load_state_arrays(arrays, strict=True)
        meta = {k: v for k, v in arrays.items() if k.startswith(("meta/", "adam/"))}
        return model, meta

    # ------------------------------------------------------------------
    # stage wiring

    def module_prefixes(self):
        return {
            "target": "target/",
            "source": "source/",
            "object": "object/",
            "composer": "composer/",
        }

    def stage_param_names(self, stage: int) -> list:
        """Names trained at each stage; everything else is frozen."""
        names = []
        if stage == 1:
            for k, _ in self.bag.items():
                if k.startswith("target/"):
                    names.append(k)
            names.append("codes/z_th")
        elif stage == 2:
            for k, _ in self.bag.items():
                # warp lives under target/ and stays frozen
                if k.startswith(("source/gen/", "source/occ/", "source/skin/")):
                    names.append(k)
            names.append("codes/z_sh")
        elif stage == 3:
            for k, _ in self.bag.items():
                if k.startswith(("object/", "composer/")):
                    names.append(k)
            names.extend(["codes/z_sh3", "codes/z_o_free", "codes/z_emp"])
        else:
            raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
        return names

    def init_stage2_from_stage1(self):
        """D_sh starts from D_th: copy the skinning net weights."""
        for src_layer, dst_layer in zip(self.target.skin.mlp.layers, self.source.skin.mlp.layers):
            dst_layer.w.data = src_layer.w.data.copy()
            dst_layer.b.data = src_layer.b.data.copy()

    def init_stage3_codes(self):
        """Source codes restart from their stage-2 mean for the joint stage."""
        mean = self.z_sh.data.mean(axis=0)
        self.z_sh_anchor.data = mean.copy()
        self.z_sh3.data = np.broadcast_to(mean, self.z_sh3.data.shape).copy()

    def set_stage_trainable(self, stage: int):
        trainable = set(self.stage_param_names(stage))
        for k, t in self.bag.items():
            t.requires_grad = k in trainable
