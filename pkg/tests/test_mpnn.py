import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chemgnn import diffkernel as dk
from chemgnn.chemgraph import ChemicalSystem, GraphBatch, build_graph, molecule_rules
from chemgnn.errors import ConfigurationError, DataError
from chemgnn.models import load_checkpoint
from chemgnn.mpnn import Mpnn, MpnnConfig
from gradcheck import max_relative_error
from helpers import (
    ALL_TASKS,
    ELEMS,
    MOL_RELATIONS,
    MPNN_VARIANTS,
    batch_of,
    force_alpha_one,
    graphs,
    molecules,
    randomise,
    share_base,
    tiny_mpnn,
)
from reference import ref_mpnn


def energies(model, batch):
    return model(batch).energy.data


class TestReference:
    @pytest.mark.parametrize("variant", ("none",) + MPNN_VARIANTS)
    @pytest.mark.parametrize("mode", ["bonded-only", "fully-connected"])
    def test_matches_loop_oracle(self, variant, mode):
        model = randomise(tiny_mpnn(variant, connectivity=mode), seed=3)
        for g in graphs(molecules(3, seed=11), mode):
            expected, contrib = ref_mpnn(model, g)
            got = model(GraphBatch.from_graphs([g]))
            assert got.energy.data[0] == pytest.approx(expected, abs=1e-12)
            np.testing.assert_allclose(got.contributions.data, contrib, atol=1e-12)

    def test_bond_type_features(self):
        model = randomise(tiny_mpnn(bond_type_feature=True), seed=4)
        g = graphs(molecules(1, seed=2, sizes=(4, 4)), btf=True)[0]
        assert model(GraphBatch.from_graphs([g])).energy.data[0] == pytest.approx(ref_mpnn(model, g)[0], abs=1e-12)

    def test_path_graph_messages(self):
        # 3-node chain, first message round, compared per edge
        s = ChemicalSystem(("C", "C", "C"), [[0, 0, 0], [1.54, 0, 0], [3.08, 0, 0]])
        model = randomise(tiny_mpnn(), seed=1)
        b = batch_of([s])
        A = model.edge_matrices("message.base", b.unique_edge_features)
        h0 = model.initial_state(b)
        m, _ = model.messages(h0, b, A, [])
        W1, b1 = model.params["message.base.l1.W"].data, model.params["message.base.l1.b"].data
        W2, b2 = model.params["message.base.l2.W"].data, model.params["message.base.l2.b"].data
        d = 4

        def edge_msg(dist, hw):
            hid = [np.logaddexp(0, W1[k, 0] * dist + b1[k]) - np.log(2) for k in range(3)]
            out = np.zeros(d)
            for a in range(d):
                for c in range(d):
                    Aac = sum(W2[a * d + c, k] * hid[k] for k in range(3)) + b2[a * d + c]
                    out[a] += Aac * hw[c]
            return out

        hw = h0.data[0]
        np.testing.assert_allclose(m.data[0], edge_msg(1.54, hw), atol=1e-12)
        np.testing.assert_allclose(m.data[1], 2 * edge_msg(1.54, hw), atol=1e-12)

    def test_isolated_node_zero_message(self):
        s = ChemicalSystem(("C", "H", "O"), [[0, 0, 0], [1.09, 0, 0], [9, 9, 9]])
        model = tiny_mpnn()
        b = batch_of([s])
        A = model.edge_matrices("message.base", b.unique_edge_features)
        m, _ = model.messages(model.initial_state(b), b, A, [])
        np.testing.assert_array_equal(m.data[2], 0.0)


class TestReductions:
    @pytest.mark.parametrize("variant", MPNN_VARIANTS)
    def test_alpha_one_is_base(self, variant):
        b = batch_of(molecules(12, seed=5))
        spec = randomise(tiny_mpnn(variant), seed=8)
        base = tiny_mpnn()
        share_base(spec, base)
        force_alpha_one(spec)
        assert spec.alpha == 1.0
        np.testing.assert_allclose(energies(spec, b), energies(base, b), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("variant", ["weighting-scalar", "weighting-vector"])
    @pytest.mark.parametrize("logit", [-3.0, 0.0, 2.5])
    def test_unit_lambda_is_base(self, variant, logit):
        b = batch_of(molecules(12, seed=6))
        spec = randomise(tiny_mpnn(variant), seed=9)
        for k, p in spec.params.items():
            if k.startswith("lambda"):
                p.data[...] = 1.0
        spec.params["alpha.logit"].data[...] = logit
        base = tiny_mpnn()
        share_base(spec, base)
        np.testing.assert_allclose(energies(spec, b), energies(base, b), rtol=0, atol=1e-12)

    def test_tied_equals_concat_with_stacked_blocks(self):
        b = batch_of(molecules(10, seed=7), "fully-connected")
        tied = randomise(tiny_mpnn("update-tied", connectivity="fully-connected"), seed=1)
        wide = tiny_mpnn("update-concat", connectivity="fully-connected")
        share_base(tied, wide)
        R = 3
        s = tied.store
        for g in "zrh":
            wide.params[f"update.impl2.W{g}"].data[...] = np.concatenate(
                [s[f"update.impl3.W{g}"].data] + [s[f"update.impl3.Q{g}"].data] * R, axis=1)
            wide.params[f"update.impl2.b{g}"].data[...] = s[f"update.impl3.b{g}"].data
        materialised = tied.tied_gru()
        for g, W in zip("zrh", (materialised.W_z, materialised.W_r, materialised.W_h)):
            np.testing.assert_array_equal(W.data, wide.params[f"update.impl2.W{g}"].data)
        np.testing.assert_allclose(energies(tied, b), energies(wide, b), rtol=0, atol=1e-12)


class TestInvariances:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 1000), variant=st.sampled_from(("none",) + MPNN_VARIANTS))
    def test_permutation(self, seed, variant):
        mol = molecules(1, seed=seed, sizes=(3, 6))[0]
        perm = np.random.default_rng(seed).permutation(len(mol))
        bonds = tuple(sorted((min(int(np.argsort(perm)[i]), int(np.argsort(perm)[j])),
                              max(int(np.argsort(perm)[i]), int(np.argsort(perm)[j])), l) for i, j, l in mol.bonds))
        shuffled = ChemicalSystem(tuple(mol.elements[k] for k in perm), mol.coords[perm], bonds=bonds)
        model = randomise(tiny_mpnn(variant), seed=seed)
        e1, e2 = energies(model, batch_of([mol])), energies(model, batch_of([shuffled]))
        assert e1[0] == pytest.approx(e2[0], abs=1e-10)

    def test_far_copy_doubles(self):
        mol = molecules(1, seed=3, sizes=(4, 4))[0]
        far = mol.coords + 100.0
        bonds = mol.bonds + tuple((i + 4, j + 4, l) for i, j, l in mol.bonds)
        double = ChemicalSystem(mol.elements * 2, np.vstack([mol.coords, far]), bonds=bonds)
        model = randomise(tiny_mpnn("update-separate"), seed=2)
        assert energies(model, batch_of([double]))[0] == pytest.approx(2 * energies(model, batch_of([mol]))[0], abs=1e-12)

    def test_contributions_sum_to_energy(self):
        b = batch_of(molecules(6, seed=1))
        p = randomise(tiny_mpnn("message"), seed=0)(b)
        sums = np.bincount(b.node_graph, weights=p.contributions.data)
        np.testing.assert_allclose(sums, p.energy.data, atol=1e-12)


class TestGradients:
    @pytest.mark.parametrize("variant", ("none",) + MPNN_VARIANTS)
    def test_energy_gradient(self, variant):
        b = batch_of(molecules(2, seed=4, sizes=(3, 4)), "fully-connected")
        model = randomise(tiny_mpnn(variant, connectivity="fully-connected"), seed=5)
        target = np.array([0.3, -0.2])

        def loss():
            return dk.mse_loss(model(b).energy, target)

        err, key = max_relative_error(loss, model.params)
        assert err < 1e-4, key


class TestParameterCounts:
    def counts(self, variant, relations=MOL_RELATIONS, d=73):
        return Mpnn(MpnnConfig(variant=variant, relations=relations, state_size=d)).count_params()

    def test_weighting_closed_forms(self):
        rels = ("single", "double", "triple", "aromatic", "no-bond")
        assert self.counts("weighting-scalar", rels)["added"] == 4
        assert self.counts("weighting-vector", rels)["added"] == 292

    def test_kernel_closed_forms(self):
        d, H, R = 73, 128, 2
        edge_net = (1 * H + H) + (H * d * d + d * d)
        gru = 3 * (d * 2 * d + d)
        base = self.counts("none")
        assert base["base"] == edge_net + gru + ((4 * d) * H + H + H + 1)
        assert self.counts("message")["added"] == R * edge_net
        assert self.counts("update-separate")["added"] == R * gru
        assert self.counts("update-concat")["added"] == 3 * (d * (d + R * d) + d)
        assert self.counts("update-tied")["added"] == 3 * (2 * d * d + d)
        assert self.counts("message")["mixing"] == 1

    def test_ordering(self):
        added = [self.counts(v)["added"] for v in ("message", "update-separate", "update-concat", "update-tied",
                                                   "weighting-vector", "weighting-scalar")]
        assert added == sorted(added, reverse=True) and len(set(added)) == 6

    def test_percentage(self):
        c = self.counts("message")
        assert c["percent"] == pytest.approx(100 * c["added"] / c["base"])


class TestConfigAndCheckpoint:
    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            tiny_mpnn("attention")

    def test_unknown_config_key(self):
        with pytest.raises(ConfigurationError, match="colour"):
            MpnnConfig.from_dict({"colour": 1})

    def test_state_too_small(self):
        with pytest.raises(ConfigurationError):
            MpnnConfig(state_size=3)

    def test_relation_outside_set(self):
        model = tiny_mpnn("message")
        with pytest.raises(DataError, match="no-bond"):
            model(batch_of(molecules(2, seed=1), "fully-connected"))

    def test_checkpoint_roundtrip(self, tmp_path):
        model = randomise(tiny_mpnn("update-concat", aux_tasks=ALL_TASKS), seed=3)
        model.save(tmp_path / "m.json")
        again = load_checkpoint(tmp_path / "m.json")
        b = batch_of(molecules(4, seed=2))
        np.testing.assert_array_equal(energies(again, b), energies(model, b))
        keys = set(model.params)
        assert {"message.base.l1.W", "update.impl2.Wz", "alpha.logit", "readout.l1.W", "aux.dsg.W"} <= keys
        assert (tmp_path / "m.json").read_text() == (tmp_path / "m.json").read_text()

    def test_alpha_reported_in_unit_interval(self):
        model = tiny_mpnn("message")
        assert model.alpha == 0.5
        model.params["alpha.logit"].data[...] = 40.0
        assert 0.0 < model.alpha <= 1.0
