"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion
lines. Everything is property-based on the deterministic synthetic
backend; the real-checkpoint integration is optional and skipped unless
a checkpoint is configured.
"""
import json
import os
import time
import warnings

import numpy as np
import pytest
import torch
from click.testing import CliRunner

import oracles
from dynedit import archive as archive_io
from dynedit.attention import CrossAttentionMap, TokenAttention
from dynedit.backends.base import LatentCode
from dynedit.backends.synthetic import SyntheticBackend
from dynedit.bgmask import (
    ClusterLabeling,
    agreement_table,
    downsample_area,
    estimate_background,
    upsample_nearest,
)
from dynedit.cli import main as cli_main
from dynedit.config import LossWeights, NullTextConfig
from dynedit.edit import EditSpec, edit_image, inject_cross_attention, compile_edit
from dynedit.inversion import ddim_invert, ddim_sample, ddim_step_to
from dynedit.losses import (
    gaussian_kernel,
    loss_attention_balance,
    loss_background,
    loss_disjoint,
    total_loss,
)
from dynedit.metrics import iou_curve
from dynedit.nulltext import nti_full, nti_step
from dynedit.tokenopt import DynamicTokenSet, initial_token_set, noun_attention_maps


def _report(n: int, summary: str) -> None:
    print(f"\nPASS: criterion {n} - {summary}", flush=True)


@pytest.fixture(scope="module")
def inversion(backend, scene, stock_cond):
    return ddim_invert(backend, scene.image, stock_cond, record_attention=False)


def wrap_maps(arrays):
    return [TokenAttention(map=torch.as_tensor(a, dtype=torch.float64), token_position=i)
            for i, a in enumerate(arrays)]


def test_criterion_1_loss_oracles():
    rng = np.random.default_rng(2024)
    started = time.monotonic()
    trials = 0
    for _ in range(110):
        k = int(rng.integers(2, 5))
        size = int(rng.integers(2, 7))
        maps = [rng.uniform(0.01, 1.0, (size, size)) for _ in range(k)]
        mask = (rng.uniform(size=(size, size)) > 0.5).astype(float)
        if mask.sum() == 0:
            mask[0, 0] = 1.0
        wrapped = wrap_maps(maps)
        assert abs(float(loss_disjoint(wrapped)) - oracles.disjoint_loss(maps)) < 1e-6
        assert abs(float(loss_background(wrapped, torch.as_tensor(mask)))
                   - oracles.background_loss(maps, mask)) < 1e-6
        assert abs(float(loss_attention_balance(wrapped))
                   - oracles.balance_loss(maps)) < 1e-6
        trials += 1
    elapsed = time.monotonic() - started
    assert trials >= 100
    assert elapsed < 10.0
    _report(1, f"three losses match brute force to 1e-6 on {trials} fixtures "
               f"in {elapsed:.2f}s")


def test_criterion_2_gradient_checks(backend, scene, pipeline_result):
    started = time.monotonic()
    bg = pipeline_result.background16.to_tensor()
    weights = LossWeights()
    kernel = gaussian_kernel(3, 0.5)
    z = LatentCode(data=torch.as_tensor(scene.image, dtype=torch.float64) * 0.85,
                   timestep_index=20)
    tokens = initial_token_set(backend, scene.prompt, scene.noun_words, timestep=20)
    positions = tokens.positions
    dim = backend.embed_dim

    def forward(flat):
        mapping = {pos: flat[i * dim:(i + 1) * dim] for i, pos in enumerate(positions)}
        ts = DynamicTokenSet(tokens=mapping, timestep=20)
        maps = noun_attention_maps(backend, z, 20, scene.prompt, scene.noun_words, ts)
        return total_loss(maps, bg, weights, kernel=kernel).total

    flat = torch.cat([tokens.tokens[p] for p in positions]).clone().requires_grad_(True)
    assert flat.dtype == torch.float64
    (analytic,) = torch.autograd.grad(forward(flat), flat)

    eps = 1e-4
    numeric = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            up = flat.detach().clone(); up[i] += eps
            down = flat.detach().clone(); down[i] -= eps
            numeric[i] = (forward(up) - forward(down)) / (2 * eps)

    worst = 0.0
    for k, pos in enumerate(positions):
        sl = slice(k * dim, (k + 1) * dim)
        rel = float((analytic[sl] - numeric[sl]).norm() / numeric[sl].norm())
        worst = max(worst, rel)
        assert rel < 1e-3
    elapsed = time.monotonic() - started
    assert elapsed < 60.0
    _report(2, f"analytic vs central-difference gradients rel err {worst:.2e} "
               f"for every token in {elapsed:.1f}s")


def test_criterion_3_inversion_fidelity(backend, stock_cond, scene, inversion):
    resampled = ddim_sample(backend, inversion.trajectory[50], stock_cond,
                            guidance_scale=1.0)
    worst = 0.0
    for t in range(51):
        ref = inversion.trajectory[t].data
        rel = float((resampled[t].data - ref).norm() / ref.norm())
        worst = max(worst, rel)
        assert rel < 1e-5

    # Equal adjacent noise levels recombine to the input for any noise.
    class _Flat:
        def signal(self, t):
            return torch.tensor(0.8, dtype=torch.float64)

        def noise(self, t):
            return torch.tensor(0.6, dtype=torch.float64)

    gen = torch.Generator().manual_seed(0)
    z = torch.randn(4, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 8, 8, generator=gen, dtype=torch.float64)
    recombined = ddim_step_to(_Flat(), z, 3, 4, eps)
    assert float((recombined - z).abs().max()) < 1e-12

    # Zero noise prediction makes the step a pure signal rescaling.
    zeroed = SyntheticBackend.zeroed(num_steps=50)
    cond0 = zeroed.encode_prompt(scene.prompt, noun_words=scene.noun_words)
    z0 = LatentCode(data=z, timestep_index=10)
    from dynedit.inversion import ddim_invert_step
    stepped = ddim_invert_step(zeroed, z0, 10, cond0)
    ratio = zeroed.schedule.signal(11) / zeroed.schedule.signal(10)
    assert float((stepped.data - ratio * z).abs().max()) < 1e-12
    _report(3, f"round trip max rel err {worst:.2e}; closed forms exact "
               f"to 64-bit rounding")


def test_criterion_4_null_text_contract(backend, stock_cond, inversion):
    trajectory = inversion.trajectory
    # w=1: the null branch carries zero gradient.
    null = backend.encode_null().embeddings.clone().requires_grad_(True)
    z = trajectory[30]
    with torch.no_grad():
        eps_c = backend.predict_noise(z, 30, stock_cond).noise_prediction
    from dynedit.backends.base import TextEmbeddingSequence
    eps_n = backend.predict_noise(z, 30, TextEmbeddingSequence(embeddings=null)).noise_prediction
    w = 1.0
    guided = ddim_step_to(backend.schedule, z.data, 30, 29,
                          w * eps_c + (1.0 - w) * eps_n)
    loss = torch.mean((guided - trajectory[29].data) ** 2)
    (grad,) = torch.autograd.grad(loss, null)
    assert float(grad.abs().max()) == 0.0

    step = nti_step(backend, z, trajectory[29], 30, stock_cond,
                    null.detach(), guidance_scale=1.0)
    assert torch.equal(step.null_embedding, null.detach())
    assert step.iterations == 0

    # w=7.5: descent at every step and small mean loss.
    pre_losses, post_losses = [], []
    warm = backend.encode_null().embeddings
    z_bar = trajectory[50]
    for t in range(50, 0, -1):
        result = nti_step(backend, z_bar, trajectory[t - 1], t, stock_cond, warm,
                          guidance_scale=7.5, config=NullTextConfig())
        assert result.final_loss <= result.initial_loss
        pre_losses.append(result.initial_loss)
        post_losses.append(result.final_loss)
        warm = result.null_embedding
        z_bar = result.z_prev
    mean_final = float(np.mean(post_losses))
    assert mean_final < 1e-4
    _report(4, f"w=1 null gradient identically zero; w=7.5 post<=pre at all 50 "
               f"steps, mean final loss {mean_final:.2e}")


def test_criterion_5_pipeline_totality_and_effect(pipeline_result, scene):
    assert len(pipeline_result.token_opt_log) == 50
    for t, log in pipeline_result.token_opt_log.items():
        assert log["converged"] or log["cap_hit"], f"no exit condition at t={t}"
        assert log["iterations"] <= 20

    pre_vals, post_vals = [], []
    for k, word in enumerate(scene.noun_words):
        gt = scene.mask_at(word, 16)
        pre = iou_curve(pipeline_result.pre_noun_maps[k], gt).at(0.5)
        post = iou_curve(pipeline_result.post_noun_maps[k], gt).at(0.5)
        assert post > pre, f"{word}: post {post:.3f} <= pre {pre:.3f}"
        pre_vals.append(pre)
        post_vals.append(post)
    assert float(np.mean(post_vals)) > float(np.mean(pre_vals))
    _report(5, "pipeline total (every loop converged or cap-warned); IoU@0.5 "
               f"pre {np.mean(pre_vals):.3f} -> post {np.mean(post_vals):.3f} "
               f"(strict, per noun and mean)")


def test_criterion_6_background_estimator():
    res = 32
    a = np.zeros((res, res)); a[2:10, 2:10] = 1.0
    b = np.zeros((res, res)); b[16:28, 16:28] = 1.0
    bg = 1.0 - a - b
    clusters = ClusterLabeling(labels=(a + 2 * b).astype(int), num_clusters=3)
    token_maps = wrap_maps([downsample_area(a, 16) * 0.9,
                            downsample_area(b, 16) * 0.9])

    mask = estimate_background(clusters, token_maps, threshold=0.2)
    assert oracles.iou(mask.mask > 0, bg > 0) == 1.0

    table = agreement_table(clusters, token_maps)
    worst = 0.0
    for n, tok in enumerate(token_maps):
        attn32 = upsample_nearest(tok.map.numpy(), res)
        for v in range(clusters.num_clusters):
            diff = abs(table[n, v] - oracles.agreement(attn32, clusters.mask(v)))
            worst = max(worst, diff)
            assert diff < 1e-9

    rng = np.random.default_rng(7)
    noisy = wrap_maps([rng.uniform(size=(16, 16)) * 0.5 for _ in range(2)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sizes = [estimate_background(clusters, noisy, threshold=th).popcount()
                 for th in np.linspace(0.05, 0.95, 10)]
    assert all(s1 <= s2 for s1, s2 in zip(sizes, sizes[1:]))
    _report(6, f"planted background recovered exactly (IoU 1.0); sigma matches "
               f"formula to {worst:.1e}; mask monotone in TH")


def test_criterion_7_edit_identities(pipeline_result, backend, run_config):
    ident = edit_image(pipeline_result, EditSpec.identity(), backend, run_config)
    for za, zb in zip(ident.edited_latents, ident.reconstruction_latents):
        assert torch.equal(za.data, zb.data)
    np.testing.assert_array_equal(ident.edited_image, ident.reconstruction_image)

    unit = edit_image(pipeline_result,
                      EditSpec(mode="reweight", reweight_factors={"cat": 1.0, "dog": 1.0}),
                      backend, run_config)
    for za, zb in zip(unit.edited_latents, unit.reconstruction_latents):
        assert torch.equal(za.data, zb.data)

    spec = EditSpec(mode="reweight", reweight_factors={"dog": 2.5})
    cond = backend.encode_prompt("a cat and a dog", noun_words=("cat", "dog"))
    plan, _ = compile_edit(spec, "a cat and a dog", ("cat", "dog"), 50, cond,
                           lambda p, n: backend.encode_prompt(p, noun_words=n))
    gen = torch.Generator().manual_seed(1)
    src = torch.softmax(torch.randn(256, 8, generator=gen, dtype=torch.float64), dim=-1)
    tgt = torch.softmax(torch.randn(256, 8, generator=gen, dtype=torch.float64), dim=-1)
    out = inject_cross_attention(CrossAttentionMap(values=src, timestep=40),
                                 CrossAttentionMap(values=tgt, timestep=40), plan, 40)
    for col in range(8):
        if col == 5:  # "dog" slot
            assert torch.allclose(out.values[:, col], 2.5 * tgt[:, col])
        else:
            assert torch.equal(out.values[:, col], tgt[:, col])
    _report(7, "identity edit bit-for-bit; unit reweight no-op; reweight "
               "touches only its target column")


def test_criterion_8_eval_harness():
    gt = np.zeros((8, 8)); gt[1:4, 2:6] = 1.0
    curve = iou_curve(gt.copy(), gt, steps=101)
    interior = (curve.thresholds > 0) & (curve.thresholds < 1)
    assert np.all(curve.iou[interior] == 1.0)

    hand_gt = np.zeros((4, 4)); hand_gt[0, 0] = hand_gt[0, 1] = 1.0
    pred = np.zeros((4, 4)); pred[0, 1] = 1.0; pred[1, 1] = 1.0; pred[3, 3] = 0.2
    hand = iou_curve(pred, hand_gt, steps=101)
    assert hand.at(0.5) == pytest.approx(1.0 / 3.0)
    _report(8, "IoU sweep is 1.0 for map==mask; 4x4 half-overlap case gives "
               "1/3 at threshold 0.5")


def test_criterion_9_cli_determinism(tmp_path, scene):
    runner = CliRunner()
    archive_io.write_archive(tmp_path / "scene.naa", {"image": scene.image})
    (tmp_path / "config.json").write_text(json.dumps({"num_steps": 12}))
    hashes = []
    for name in ("a", "b"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = runner.invoke(cli_main, [
                "invert", "--image", str(tmp_path / "scene.naa"),
                "--prompt", scene.prompt, "--nouns", ",".join(scene.noun_words),
                "--config", str(tmp_path / "config.json"), "--seed", "11",
                "--out", str(tmp_path / name),
            ])
        assert result.exit_code == 0, result.output
        manifest = json.loads((tmp_path / name / "run.manifest.json").read_text())
        hashes.append(manifest["content_hash"])
    assert hashes[0] == hashes[1]
    _report(9, f"repeated cmd_invert with fixed seed: manifest hash {hashes[0][:12]}... "
               "identical across runs")


CHECKPOINT_VAR = "DYNEDIT_CHECKPOINT_DIR"


@pytest.mark.skipif(CHECKPOINT_VAR not in os.environ,
                    reason=f"optional integration: set {CHECKPOINT_VAR} to a "
                           "Stable Diffusion checkpoint to enable")
def test_criterion_10_real_checkpoint_integration(tmp_path):
    """Not gating: requires a real checkpoint plus the `real` extra.

    Reference magnitudes from the published comparison (CLIP-Score ~31.5%,
    structure distance ~0.03) are context, not assertions; this exercise
    checks reconstruction quality and that attention grids render.
    """
    pytest.importorskip("diffusers")
    from PIL import Image as PILImage

    from dynedit.backends.sd_adapter import StableDiffusionBackend
    from dynedit.config import RunConfig
    from dynedit.pipeline import run_pipeline, save_run

    backend = StableDiffusionBackend(checkpoint=os.environ[CHECKPOINT_VAR],
                                     num_steps=50)
    size = backend._image_size
    rng = np.random.default_rng(0)
    image = (rng.uniform(0, 255, size=(size, size, 3))).astype(np.uint8)
    config = RunConfig(backend="real")
    result = run_pipeline(backend, image, "a cat and a dog", ["cat", "dog"], config)
    save_run(result, tmp_path, config)
    ident = edit_image(result, EditSpec.identity(), backend, config)
    recon = ident.reconstruction_image.astype(np.float64)
    assert np.abs(recon - image.astype(np.float64)).mean() < 25.0  # 8-bit scale
    _report(10, "real-checkpoint reconstruction and attention grids OK")
