"""Shared staged-training pipeline used by the heavier acceptance tests.

One pipeline run per seed: pretrain the base text-to-image model, train one
condition adapter per type on the frozen base, then train task-specific
denoising adapters. Every random draw is seeded so runs are reproducible.
"""

from dataclasses import dataclass

import numpy as np

from mcdit import data as toydata
from mcdit.flow import (
    MODE_TRAINING_BASED,
    MODE_TRAINING_FREE,
    TrainPlan,
    TrainStage,
    eval_rf_loss,
    sample_euler,
    train,
)
from mcdit.lora import ConditionType, LoraRegistry
from mcdit.metrics import depth_mse, edge_f1, pixel_mask_to_grid, ssim, xattn_map
from mcdit.model import Model, ModelConfig, make_adapter

CANNY, DEPTH = ConditionType.CANNY, ConditionType.DEPTH
SUBJECT, MASK_FILL = ConditionType.SUBJECT, ConditionType.MASK_FILL

ACCEPT_CFG = ModelConfig(image_size=32, patch_size=4, embed_dim=64, head_dim=32,
                         num_heads=2, num_dual_blocks=2, num_single_blocks=2,
                         vocab_size=16)

BASE_STEPS = 2000
COND_STEPS = 1500
DENOISE_STEPS = 600
BATCH = 4
LR = 1e-3
RANK = 16
EVAL_N = 64
EULER_STEPS = 12
DATA_SEED = 100_000


@dataclass
class PipelineResult:
    seed: int
    model: Model
    registry: LoraRegistry
    denoise_cd: object  # adapter trained on canny+depth
    denoise_sm: object  # adapter trained on subject+mask_fill
    base_curve: list
    cond_curves: dict
    denoise_curves: dict


def build_dataset(n_scenes: int = 1100):
    samples = [toydata.gen_scene(DATA_SEED + i) for i in range(n_scenes)]
    train_samples = [s for s in samples if s.split == toydata.Split.TRAIN]
    test_samples = [s for s in samples if s.split == toydata.Split.TEST][:EVAL_N]
    return (
        [toydata.to_train_example(s) for s in train_samples],
        test_samples,
        [toydata.to_train_example(s) for s in test_samples],
    )


def run_pipeline(seed: int, train_ds, cond_steps=COND_STEPS, base_steps=BASE_STEPS,
                 denoise_steps=DENOISE_STEPS) -> PipelineResult:
    model = Model(ACCEPT_CFG, np.random.default_rng(seed))
    registry = LoraRegistry()

    base_curve, _ = train(
        model,
        TrainPlan(stage=TrainStage.BASE, steps=base_steps, batch_size=BATCH,
                  learning_rate=LR, seed=seed, log_every=50, lr_schedule="cosine"),
        train_ds,
    )

    cond_curves = {}
    for i, ct in enumerate((CANNY, DEPTH, SUBJECT, MASK_FILL)):
        registry.register(ct, make_adapter(
            ACCEPT_CFG, rank=RANK, rng=np.random.default_rng(seed * 100 + i + 1)))
        cond_curves[ct], _ = train(
            model,
            TrainPlan(stage=TrainStage.CONDITION_LORA, cond_type=ct, steps=cond_steps,
                      batch_size=BATCH, learning_rate=LR, seed=seed + 11 * (i + 1),
                      log_every=50, lr_schedule="cosine"),
            train_ds, registry,
        )

    denoise_curves = {}
    adapters = {}
    for j, (name, types) in enumerate(
            [("cd", (CANNY, DEPTH)), ("sm", (SUBJECT, MASK_FILL))]):
        registry.denoising_adapter = make_adapter(
            ACCEPT_CFG, rank=RANK, rng=np.random.default_rng(seed * 100 + 50 + j))
        denoise_curves[name], _ = train(
            model,
            TrainPlan(stage=TrainStage.DENOISING_LORA, condition_types=types,
                      steps=denoise_steps, batch_size=BATCH, learning_rate=LR,
                      seed=seed + 77 * (j + 1), log_every=50, lr_schedule="cosine"),
            train_ds, registry,
        )
        adapters[name] = registry.denoising_adapter

    registry.denoising_adapter = None
    return PipelineResult(seed, model, registry, adapters["cd"], adapters["sm"],
                          base_curve, cond_curves, denoise_curves)


def eval_generation(result: PipelineResult, test_samples, test_ds, cond_types,
                    mode=MODE_TRAINING_FREE, euler_steps=EULER_STEPS):
    """Mean edge F1 / depth MSE / SSIM over the held-out set (paired noise)."""
    f1s, mses, ssims = [], [], []
    for i, (s, ex) in enumerate(zip(test_samples, test_ds)):
        conds = [(ct, ex.cond_inputs[ct]) for ct in cond_types]
        img = sample_euler(result.model, ex.caption_ids, conds, steps=euler_steps,
                           seed=777_000 + i, mode=mode, registry=result.registry)
        gen01 = (img + 1.0) / 2.0
        f1s.append(edge_f1(toydata.edge_map(gen01), s.conditions[CANNY]))
        mses.append(depth_mse(toydata.extract_depth(gen01), s.conditions[DEPTH]))
        ssims.append(ssim(gen01, s.target))
    return float(np.mean(f1s)), float(np.mean(mses)), float(np.mean(ssims))


def heldout_losses(result: PipelineResult, test_ds):
    """Held-out flow loss on canny+depth data, without/with the denoising adapter."""
    result.registry.denoising_adapter = result.denoise_cd
    free = eval_rf_loss(result.model, test_ds, (CANNY, DEPTH), result.registry,
                        use_denoise_adapter=False, seed=4242)
    based = eval_rf_loss(result.model, test_ds, (CANNY, DEPTH), result.registry,
                         use_denoise_adapter=True, seed=4242)
    return free, based


def subject_concentration(result: PipelineResult, test_samples, n_probe: int = 8):
    """Mean in-mask X->Subject attention concentration, training-free vs -based."""
    result.registry.denoising_adapter = result.denoise_sm
    cfg = result.model.config
    rng = np.random.default_rng(9090)
    free_scores, based_scores = [], []
    for s in test_samples[:n_probe]:
        ex = toydata.to_train_example(s)
        conds = [(SUBJECT, ex.cond_inputs[SUBJECT]), (MASK_FILL, ex.cond_inputs[MASK_FILL])]
        mask_grid = pixel_mask_to_grid(toydata.subject_image_mask(s.scene), cfg.patch_size)
        region = toydata.hole_mask(s)
        for t in (0.25, 0.5, 0.75):
            noise = rng.standard_normal(ex.x1.shape)
            x_t = (1.0 - t) * noise + t * ex.x1
            for use_denoise, scores in ((False, free_scores), (True, based_scores)):
                trace = xattn_map(result.model, x_t, t, ex.caption_ids, conds,
                                  target=SUBJECT, registry=result.registry,
                                  use_denoise_adapter=use_denoise, region_mask=region)
                scores.append(trace.concentration(mask_grid))
    return float(np.mean(free_scores)), float(np.mean(based_scores))
