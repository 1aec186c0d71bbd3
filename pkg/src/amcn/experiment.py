"""The fixed synthetic suite shared by the ablation and skill experiments."""
from __future__ import annotations

from dataclasses import dataclass

from .evaluate import simulated_experiment
from .synth import synth_scene
from .train import PatchArrays, TrainConfig, build_training_set, new_model, train

TRAIN_SEED0 = 1000
TEST_SEED0 = 2000


@dataclass(frozen=True)
class SuiteSpec:
    n_train: int = 20
    n_test: int = 5
    size: int = 64
    scale: int = 4


def suite_scenes(spec=SuiteSpec()):
    train_scenes = [synth_scene(TRAIN_SEED0 + i, spec.size, spec.size, spec.scale) for i in range(spec.n_train)]
    test_scenes = [synth_scene(TEST_SEED0 + i, spec.size, spec.size, spec.scale) for i in range(spec.n_test)]
    return train_scenes, test_scenes


class Suite:
    """Scenes and patch arrays built once, then reused by every training run."""

    def __init__(self, spec=SuiteSpec(), config=None):
        self.spec = spec
        self.config = config or TrainConfig(scale=spec.scale)
        self.train_scenes, self.test_scenes = suite_scenes(spec)
        patches, self.norm_stats = build_training_set(self.train_scenes, self.config)
        self.data = PatchArrays.from_patches(patches)

    def run(self, model_config=None, **overrides):
        """Train one model with ``overrides`` applied to the suite config; return (model, history, report)."""
        cfg = TrainConfig(**{**self.config.__dict__, **overrides})
        model = new_model(self.norm_stats, cfg, model_config)
        model, history = train(model, self.data, cfg)
        return model, history, simulated_experiment(model, self.test_scenes)
