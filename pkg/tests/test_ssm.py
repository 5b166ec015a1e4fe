import math
import os
import sys
import unittest

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from python_deformscan.data import TokenSequence  # noqa: E402
from python_deformscan.errors import (  # noqa: E402
    ConfigError,
    EmptyInputError,
    NumericError,
    ParameterError,
    ShapeError,
)
from python_deformscan.gradcheck import CheckType, GradChecks  # noqa: E402
from python_deformscan.model import init_parameters  # noqa: E402
from python_deformscan.ssm import (  # noqa: E402
    BlockOutput,
    DeformableMambaBlock,
    DeformableScan,
    DeformConfig,
    SelectiveSSM,
    Stage,
    channel_flip,
    dmb_forward,
    scan_recurrence,
    selective_scan_fn,
    stage_forward,
    zoh_discretize,
)
from python_deformscan.tpff import TriPathBundle, tpff  # noqa: E402


def randn(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


def softplus(x: float) -> float:
    return math.log1p(math.exp(x))


def silu(x: float) -> float:
    return x / (1 + math.exp(-x))


def toy_inputs(seed: int, n: int = 8, dim: int = 16):
    rng = np.random.default_rng(seed)
    hidden = randn(rng, 1, n + 1, dim)
    centers = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(1, n, 3)))
    base_index = torch.arange(n).reshape(1, n)
    return hidden, centers, base_index


def manual_ssm(ssm: SelectiveSSM, u: torch.Tensor, z=None) -> torch.Tensor:
    dt, B, C = torch.split(F.linear(u, ssm.x_proj.weight), [ssm.dt_rank, ssm.d_state, ssm.d_state], dim=-1)
    delta = F.linear(dt, ssm.dt_proj.weight)
    return selective_scan_fn(u, delta, -torch.exp(ssm.A_log), B, C, ssm.D, z=z,
                             delta_bias=ssm.dt_proj.bias, delta_softplus=True)


class TestZOH(unittest.TestCase):

    def test_decay(self):
        a_bar, _ = zoh_discretize(-1.0, 1.0, 0.1)
        self.assertAlmostEqual(float(a_bar), 0.904837, places=6)

    def test_input_gain(self):
        _, b_bar = zoh_discretize(-1.0, 1.0, 0.1)
        self.assertAlmostEqual(float(b_bar), 0.0951626, places=7)

    def test_vanishing_state_limit(self):
        _, b_bar = zoh_discretize(-1e-9, 1.0, 0.1)
        self.assertAlmostEqual(float(b_bar), 0.1, places=9)

    def test_branch_seam(self):
        for x in (-(1e-6 - 1e-12), -(1e-6 + 1e-12)):
            _, b_bar = zoh_discretize(x, 1.0, 1.0)
            expected = math.expm1(x) / x
            self.assertLess(abs(float(b_bar) - expected) / expected, 1e-10)

    def test_stable_decay(self):
        rng = np.random.default_rng(0)
        A = -torch.from_numpy(rng.uniform(1e-3, 10, size=50))
        delta = torch.from_numpy(rng.uniform(1e-3, 2, size=50))
        a_bar, _ = zoh_discretize(A, torch.ones(50, dtype=torch.float64), delta)
        self.assertTrue(bool((a_bar.abs() < 1).all()))

    def test_non_positive_step(self):
        with self.assertRaises(ParameterError):
            zoh_discretize(-1.0, 1.0, 0.0)


class TestScan(unittest.TestCase):

    def test_hand_unrolled_recurrence(self):
        a_bar = torch.full((1, 3, 1, 1), 0.5, dtype=torch.float64)
        bu = torch.ones(1, 3, 1, 1, dtype=torch.float64)
        c = torch.ones(1, 3, 1, dtype=torch.float64)
        self.assertEqual(scan_recurrence(a_bar, bu, c).reshape(-1).tolist(), [1.0, 1.5, 1.75])

    def test_zero_input(self):
        rng = np.random.default_rng(0)
        u = torch.zeros(1, 5, 3, dtype=torch.float64)
        A = -torch.from_numpy(rng.uniform(0.5, 2, size=(3, 2)))
        y = selective_scan_fn(u, randn(rng, 1, 5, 3), A, randn(rng, 1, 5, 2), randn(rng, 1, 5, 2),
                              randn(rng, 3), delta_softplus=True)
        self.assertTrue(torch.equal(y, torch.zeros_like(y)))

    def test_single_step(self):
        u = torch.tensor([[[2.0]]], dtype=torch.float64)
        delta = torch.tensor([[[0.1]]], dtype=torch.float64)
        A = torch.tensor([[-1.0]], dtype=torch.float64)
        B = torch.tensor([[[1.0]]], dtype=torch.float64)
        C = torch.tensor([[[3.0]]], dtype=torch.float64)
        D = torch.tensor([0.5], dtype=torch.float64)
        y = selective_scan_fn(u, delta, A, B, C, D)
        expected = 3.0 * (-math.expm1(-0.1)) * 2.0 + 0.5 * 2.0
        self.assertAlmostEqual(float(y), expected, places=12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        L, d, n = 4, 2, 3
        u, delta, z = randn(rng, 1, L, d), randn(rng, 1, L, d), randn(rng, 1, L, d)
        A = -torch.from_numpy(rng.uniform(0.5, 2, size=(d, n)))
        B, C = randn(rng, 1, L, n), randn(rng, 1, L, n)
        D, bias = randn(rng, d), randn(rng, d)
        y = selective_scan_fn(u, delta, A, B, C, D, z=z, delta_bias=bias, delta_softplus=True)
        for i in range(d):
            h = [0.0] * n
            for t in range(L):
                step = softplus(float(delta[0, t, i]) + float(bias[i]))
                for s in range(n):
                    a = float(A[i, s])
                    h[s] = math.exp(step * a) * h[s] + math.expm1(step * a) / a * float(B[0, t, s]) * float(u[0, t, i])
                out = sum(float(C[0, t, s]) * h[s] for s in range(n)) + float(D[i]) * float(u[0, t, i])
                self.assertAlmostEqual(float(y[0, t, i]), out * silu(float(z[0, t, i])), places=12)

    def test_bounded_output(self):
        rng = np.random.default_rng(2)
        L, d, n = 64, 4, 8
        A = -torch.from_numpy(rng.uniform(0.1, 4, size=(d, n)))
        y = selective_scan_fn(torch.from_numpy(rng.uniform(-1, 1, size=(2, L, d))), randn(rng, 2, L, d), A,
                              torch.from_numpy(rng.uniform(-1, 1, size=(2, L, n))),
                              torch.from_numpy(rng.uniform(-1, 1, size=(2, L, n))), delta_softplus=True)
        self.assertTrue(bool(torch.isfinite(y).all()))
        self.assertLess(float(y.abs().max()), 1e6)

    def test_overflow_reports_step(self):
        a_bar = torch.full((1, 4, 1, 1), 1e200, dtype=torch.float64)
        bu = torch.full((1, 4, 1, 1), 1e200, dtype=torch.float64)
        c = torch.ones(1, 4, 1, dtype=torch.float64)
        with self.assertRaises(NumericError) as ctx:
            scan_recurrence(a_bar, bu, c)
        self.assertEqual(ctx.exception.step, 1)

    def test_empty_and_misaligned(self):
        empty = torch.zeros(1, 0, 2, dtype=torch.float64)
        with self.assertRaises(EmptyInputError):
            selective_scan_fn(empty, empty, -torch.ones(2, 1), torch.zeros(1, 0, 1), torch.zeros(1, 0, 1))
        u = torch.zeros(1, 3, 2, dtype=torch.float64)
        with self.assertRaises(ShapeError):
            selective_scan_fn(u, u[:, :2], -torch.ones(2, 1), torch.zeros(1, 3, 1), torch.zeros(1, 3, 1))

    def test_channel_flip_involution(self):
        x = randn(np.random.default_rng(3), 2, 5, 6)
        self.assertTrue(torch.equal(channel_flip(channel_flip(x)), x))
        self.assertEqual(channel_flip(x)[0, 0, 0].item(), x[0, 0, -1].item())

    def test_state_initializations(self):
        arange = SelectiveSSM(4, 3, 1)
        self.assertTrue(torch.allclose(arange.A[0], -torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)))
        linspace = SelectiveSSM(4, 3, 1, state_init="linspace", learn_skip=False)
        self.assertTrue(torch.allclose(linspace.A[0], -torch.tensor([0.5, 1.25, 2.0], dtype=torch.float64)))
        self.assertNotIn("D", dict(linspace.named_parameters()))
        with self.assertRaises(ConfigError):
            SelectiveSSM(4, 3, 1, state_init="random")

    def test_gradient_checks(self):
        checks = GradChecks(seed=0)
        for check_type in (CheckType.ZOH, CheckType.SELECTIVE_SCAN):
            report = checks.execute_check(check_type)
            self.assertTrue(report.passed, report.message)


class TestDeformableScan(unittest.TestCase):

    def frozen_scan(self, **cfg) -> DeformableScan:
        """Réseau de décalages à sortie nulle : delta_p = delta_t = 0."""
        scan = init_parameters(DeformableScan(16, DeformConfig(**cfg)), 0).eval()
        with torch.no_grad():
            scan.offset_net.project.weight.zero_()
            scan.offset_net.project.bias.zero_()
        return scan

    def test_zero_offsets_keep_order(self):
        hidden, centers, base_index = toy_inputs(0)
        out = self.frozen_scan(k_r=1, sigma_t=0.05)(hidden, centers, base_index)
        self.assertTrue(torch.equal(out.new_order, base_index.to(torch.float64)))
        self.assertTrue(torch.equal(out.new_coords, centers))
        # GKR à un voisin + résidu : 2F ; GDR quasi identité
        expected = torch.cat([hidden[:, :1], 2 * hidden[:, 1:]], dim=1)
        self.assertLess(float((out.features - expected).abs().max()), 1e-10)

    def test_class_token_bypasses_deformation(self):
        hidden, centers, base_index = toy_inputs(1)
        scan = init_parameters(DeformableScan(16, DeformConfig(radius=0.5)), 1).eval()
        out = scan(hidden, centers, base_index)
        self.assertTrue(torch.equal(out.features[:, 0], hidden[:, 0]))
        self.assertLess(float(out.offsets.delta_p.abs().max()), 1.0)

    def test_hard_reorder_permutes_rows(self):
        hidden, centers, base_index = toy_inputs(2)
        scan = init_parameters(DeformableScan(16, DeformConfig(reorder="hard", use_gkr=False)), 2).eval()
        out = scan(hidden, centers, base_index)
        rows = sorted(tuple(r) for r in out.features[0, 1:].tolist())
        self.assertEqual(rows, sorted(tuple(r) for r in hidden[0, 1:].tolist()))
        self.assertIsNone(out.weights)

    def test_fixed_order_and_disabled_sequence_offsets(self):
        hidden, centers, base_index = toy_inputs(3)
        for cfg in (DeformConfig(reorder="fixed", use_gkr=False), DeformConfig(enable_dt=False, use_gkr=False)):
            scan = init_parameters(DeformableScan(16, cfg), 3).eval()
            out = scan(hidden, centers, base_index)
            self.assertTrue(torch.equal(out.features, hidden))
            self.assertTrue(torch.equal(out.new_order, base_index.to(torch.float64)))

    def test_disabled_spatial_offsets(self):
        hidden, centers, base_index = toy_inputs(4)
        scan = init_parameters(DeformableScan(16, DeformConfig(enable_dp=False, use_lcfa=False)), 4).eval()
        out = scan(hidden, centers, base_index)
        self.assertTrue(torch.equal(out.new_coords, centers))
        self.assertTrue(torch.allclose(out.weights.matrix.sum(dim=-1), torch.ones(1, 8, dtype=torch.float64)))

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            DeformConfig(reorder="random")
        with self.assertRaises(ConfigError):
            DeformConfig(sigma_t=0.0)

    def test_shape_mismatch(self):
        hidden, centers, base_index = toy_inputs(5)
        with self.assertRaises(ShapeError):
            DeformableScan(16)(hidden, centers[:, :4], base_index)


class TestDeformableMambaBlock(unittest.TestCase):

    def make_block(self, seed: int = 0, **deform) -> DeformableMambaBlock:
        block = DeformableMambaBlock(16, d_state=4, expand=2, deform=DeformConfig(radius=0.5, **deform), groups=4)
        return init_parameters(block, seed).eval()

    def test_degenerate_parameters(self):
        block = self.make_block()
        with torch.no_grad():
            for name, p in block.named_parameters():
                if not name.endswith(("sigma_s", "sigma_t")):
                    p.zero_()
        hidden, centers, base_index = toy_inputs(0)
        out = block(hidden, centers, base_index)
        self.assertEqual(out.output.shape, hidden.shape)
        self.assertTrue(bool(torch.isfinite(out.output).all()))
        self.assertTrue(torch.equal(out.output, torch.zeros_like(hidden)))

    def test_single_token(self):
        hidden, centers, base_index = toy_inputs(1, n=1)
        out = self.make_block(1)(hidden, centers, base_index)
        self.assertEqual(out.output.shape, (1, 2, 16))
        self.assertEqual(out.deform.weights.matrix.reshape(-1).tolist(), [1.0])

    def test_matches_composed_reference(self):
        block = self.make_block(2)
        hidden, centers, base_index = toy_inputs(2)
        L = hidden.shape[1]
        out = block(hidden, centers, base_index)

        xz = F.linear(hidden, block.in_proj.weight)

        def forward_branch(branch, xz):
            x, z = xz.chunk(2, dim=-1)
            conv = branch.conv1d
            x = F.conv1d(x.transpose(1, 2), conv.weight, conv.bias, padding=3, groups=conv.groups)
            x = F.silu(x[..., :L].transpose(1, 2))
            return manual_ssm(branch.ssm, x, z)

        out_fwd = forward_branch(block.forward_branch, xz)
        out_chan = forward_branch(block.channel_branch, xz.flip(-1)).flip(-1)

        deformed = block.deform(hidden, centers, base_index).features
        branch = block.deform_branch
        x = F.linear(deformed, branch.linear.weight, branch.linear.bias)
        x = F.conv1d(x.transpose(1, 2), branch.conv1d.weight, branch.conv1d.bias, padding=1,
                     groups=branch.conv1d.groups).transpose(1, 2)
        out_def = manual_ssm(branch.ssm, F.gelu(x))

        fused = tpff(TriPathBundle(out_fwd, out_chan, out_def), block.fusion.tpff)
        gate = torch.sigmoid(F.linear(hidden, block.gate_proj.weight, block.gate_proj.bias))
        expected = F.linear(fused * gate, block.out_proj.weight)

        self.assertLess(float((out.output - expected).abs().max()), 1e-10)
        self.assertAlmostEqual(out.branch_norms["deform"], float(out_def.norm()), places=9)

    def test_deform_branch_degenerates_without_offsets(self):
        """delta_p = delta_t = 0, sigma_t petit : la branche D balaie l'ordre de Hilbert d'origine."""
        block = self.make_block(3, k_r=1, sigma_t=0.05)
        with torch.no_grad():
            block.deform.offset_net.project.weight.zero_()
            block.deform.offset_net.project.bias.zero_()
        hidden, centers, base_index = toy_inputs(3)
        deformed = block.deform(hidden, centers, base_index)
        direct = block.deform_branch(torch.cat([hidden[:, :1], 2 * hidden[:, 1:]], dim=1))
        self.assertLess(float((block.deform_branch(deformed.features) - direct).abs().max()), 1e-5)

    def test_fusion_variants(self):
        hidden, centers, base_index = toy_inputs(4)
        for mode in ("mean", "linear", "conv"):
            block = DeformableMambaBlock(16, d_state=4, deform=DeformConfig(radius=0.5), fusion=mode, groups=4)
            out = init_parameters(block, 4).eval()(hidden, centers, base_index)
            self.assertEqual(out.output.shape, hidden.shape)

    def test_dmb_forward_on_token_sequence(self):
        hidden, centers, base_index = toy_inputs(5)
        block = self.make_block(5)
        out = dmb_forward(TokenSequence(hidden, centers, base_index), block)
        self.assertTrue(torch.equal(out.output, block(hidden, centers, base_index).output))
        self.assertEqual(set(out.branch_norms), {"forward", "channel", "deform"})

    def test_wrong_width(self):
        hidden, centers, base_index = toy_inputs(6, dim=8)
        with self.assertRaises(ShapeError):
            self.make_block()(hidden, centers, base_index)


class ZeroMixer(nn.Module):
    def forward(self, hidden, centers, base_index):
        return BlockOutput(torch.zeros_like(hidden))


class TestStage(unittest.TestCase):

    def test_zero_mixer_is_identity(self):
        hidden, centers, base_index = toy_inputs(0)
        tokens = TokenSequence(hidden, centers, base_index)
        self.assertTrue(torch.equal(stage_forward(tokens, Stage(16, mixer=ZeroMixer())).features, hidden))

    def test_local_enhancer_residual(self):
        hidden, centers, base_index = toy_inputs(1)
        enhancer = init_parameters(nn.Linear(16, 16, dtype=torch.float64), 1)
        stage = Stage(16, mixer=ZeroMixer(), local_enhancer=enhancer)
        out = stage_forward(TokenSequence(hidden, centers, base_index), stage)
        expected = enhancer(stage.norm_local(hidden)) + hidden
        self.assertTrue(torch.allclose(out.features, expected, atol=1e-14))

    def test_layer_norm_of_constant_row(self):
        stage = Stage(16, mixer=ZeroMixer())
        with torch.no_grad():
            stage.norm_mixer.weight.fill_(3.0)
            stage.norm_mixer.bias.copy_(torch.linspace(-1, 1, 16, dtype=torch.float64))
        row = torch.full((1, 1, 16), 2.5, dtype=torch.float64)
        self.assertTrue(torch.allclose(stage.norm_mixer(row)[0, 0], stage.norm_mixer.bias, atol=1e-12))

    def test_stacked_stages_keep_shape(self):
        hidden, centers, base_index = toy_inputs(2, dim=8)
        tokens = TokenSequence(hidden, centers, base_index)
        for i in range(6):
            stage = Stage(8, d_state=4, deform=DeformConfig(radius=0.5), groups=4)
            tokens = stage_forward(tokens, init_parameters(stage, i).eval())
        self.assertEqual(tokens.features.shape, (1, 9, 8))
        self.assertTrue(torch.equal(tokens.base_index, base_index))

    def test_gradient_matches_finite_differences(self):
        report = GradChecks(seed=0).execute_check(CheckType.STAGE)
        self.assertTrue(report.passed, report.message)


if __name__ == "__main__":
    unittest.main(verbosity=2)
