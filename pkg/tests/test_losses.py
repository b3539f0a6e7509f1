"""Loss semantics: worked values, independent loop oracles, gradient checks,
and the geometric properties the margin family is supposed to have."""

import numpy as np
import pytest

from attrcenter import autodiff as ad
from attrcenter import losses as L
from attrcenter.autodiff import DiffTensor, ShapeError
from attrcenter.lattice import AttributeCategory, AttributeSchema, CenterRegistry


def t64(x, **kw):
    return DiffTensor(np.asarray(x, dtype=np.float64), **kw)


def small_schema(n_states=(3, 2)):
    cats = tuple(AttributeCategory(f"c{i}", tuple(f"s{j}" for j in range(n)))
                 for i, n in enumerate(n_states))
    return AttributeSchema(cats)


def make_registry(n_c_states=(3, 2), d=8, eps1=4.0, eps_c=1.0, eps_d=1.5, seed=0, scale=1.0):
    reg = CenterRegistry(small_schema(n_c_states), d, margin_unit=eps1,
                         attribute_margin=eps_c, identity_margin=eps_d, dtype=np.float64)
    reg.init_centers(seed=seed, scale=scale)
    return reg


def random_batch(reg, m=4, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    d = reg.embedding_dim
    return L.BatchEmbeddings(
        photos=t64(rng.normal(scale=spread, size=(m, d))),
        genuine=t64(rng.normal(scale=spread, size=(m, d))),
        impostor=t64(rng.normal(scale=spread, size=(m, d))),
        combo=rng.integers(0, reg.n_centers, size=m))


# ---------------------------------------------------------------------------
# worked analytic values
# ---------------------------------------------------------------------------


class TestWorkedValues:
    def test_center_loss_zero_at_centers(self):
        centers = t64(np.random.default_rng(0).normal(size=(4, 3)))
        y = np.array([2, 0, 3])
        x = t64(centers.data[y])
        assert L.center_loss(x, y, centers).item() == 0.0

    def test_center_loss_half_unit(self):
        x = t64([[1.0, 0.0]])
        c = t64([[0.0, 0.0]])
        assert L.center_loss(x, np.array([0]), c).item() == pytest.approx(0.5, abs=1e-9)

    def test_contrastive_center_point_one(self):
        x = t64([[1.0, 0.0]])
        centers = t64([[0.0, 0.0], [3.0, 0.0]])
        val = L.contrastive_center_loss(x, np.array([0]), centers, delta=1.0).item()
        assert val == pytest.approx(0.1, abs=1e-9)

    def test_contrastive_center_zero_at_center(self):
        centers = t64([[1.0, 2.0], [-1.0, 0.5]])
        x = t64([[1.0, 2.0]])
        assert L.contrastive_center_loss(x, np.array([0]), centers, delta=0.5).item() == 0.0

    def test_attribute_loss_hinge_value(self):
        reg = make_registry(d=2, eps_c=1.0, eps_d=1.5)
        reg.centers.data[...] = 0.0
        c0 = np.zeros(2)
        # photo at squared distance eps_c + 2, both sketches at the center
        batch = L.BatchEmbeddings(photos=t64([[np.sqrt(3.0), 0.0]]),
                                  genuine=t64([c0]), impostor=t64([c0]),
                                  combo=np.array([0]))
        assert L.attribute_loss(batch, reg).item() == pytest.approx(1.0, abs=1e-7)

    def test_attribute_loss_zero_inside_margin(self):
        reg = make_registry(d=2)
        reg.centers.data[...] = 0.0
        batch = L.BatchEmbeddings(photos=t64([[0.5, 0.0]]), genuine=t64([[0.0, 0.5]]),
                                  impostor=t64([[-0.5, 0.0]]), combo=np.array([0]))
        assert L.attribute_loss(batch, reg).item() == 0.0

    def test_identity_loss_direct_arithmetic(self):
        reg = make_registry(d=2, eps_c=1.0, eps_d=1.0)
        batch = L.BatchEmbeddings(photos=t64([[2.0, 0.0]]), genuine=t64([[0.0, 0.0]]),
                                  impostor=t64([[2.0, 0.0]]), combo=np.array([0]))
        assert L.identity_loss(batch, reg).item() == pytest.approx(2.5, abs=1e-9)

    def test_identity_loss_zero_when_solved(self):
        reg = make_registry(d=2, eps_d=1.0)
        batch = L.BatchEmbeddings(photos=t64([[1.0, 1.0]]), genuine=t64([[1.0, 1.0]]),
                                  impostor=t64([[4.0, 1.0]]), combo=np.array([0]))
        assert L.identity_loss(batch, reg).item() == 0.0

    def test_center_separation_double_count(self):
        schema = AttributeSchema((AttributeCategory("only", ("a", "b")),))
        reg = CenterRegistry(schema, 2, margin_unit=1.0, dtype=np.float64)
        reg.centers.data[...] = 0.0  # coincident, contradiction count 1
        assert L.center_separation_loss(reg).item() == pytest.approx(1.0, abs=1e-9)

    def test_center_separation_zero_when_spread(self):
        reg = make_registry(d=4, eps1=0.5)
        reg.centers.data[...] = np.random.default_rng(1).normal(size=reg.centers.shape) * 10
        assert L.center_separation_loss(reg).item() == 0.0

    def test_softmax_lambda_zero_is_plain_cross_entropy(self):
        logits = t64(np.random.default_rng(0).normal(size=(4, 6)))
        labels = np.array([0, 5, 2, 2])
        x = t64(np.random.default_rng(1).normal(size=(4, 3)))
        centers = t64(np.random.default_rng(2).normal(size=(6, 3)))
        joint = L.joint_center_softmax(logits, labels, x, labels, centers, lam=0.0)
        plain = ad.softmax_cross_entropy(logits, labels)
        assert joint.item() == pytest.approx(plain.item(), rel=1e-12)

    def test_uniform_logits_entropy(self):
        logits = t64(np.zeros((1, 7)))
        x = t64(np.zeros((1, 2)))
        centers = t64(np.zeros((7, 2)))
        val = L.joint_center_softmax(logits, np.array([3]), x, np.array([3]), centers, lam=1.0)
        assert val.item() == pytest.approx(np.log(7), rel=1e-9)


# ---------------------------------------------------------------------------
# independent loop oracles
# ---------------------------------------------------------------------------


def loop_center_loss(x, y, c):
    total = 0.0
    for i in range(x.shape[0]):
        diff = x[i] - c[y[i]]
        total += float(diff @ diff)
    return 0.5 * total


def loop_contrastive_center(x, y, c, delta):
    total = 0.0
    for i in range(x.shape[0]):
        own = float((x[i] - c[y[i]]) @ (x[i] - c[y[i]]))
        others = sum(float((x[i] - c[j]) @ (x[i] - c[j]))
                     for j in range(c.shape[0]) if j != y[i])
        total += own / (others + delta)
    return 0.5 * total


def loop_attribute_loss(p, sg, si, y, c, eps_c):
    total = 0.0
    for i in range(p.shape[0]):
        for e in (p[i], sg[i], si[i]):
            d2 = float((e - c[y[i]]) @ (e - c[y[i]]))
            total += max(d2 - eps_c, 0.0)
    return 0.5 * total


def loop_identity_loss(p, sg, si, eps_d):
    total = 0.0
    for i in range(p.shape[0]):
        total += float((p[i] - sg[i]) @ (p[i] - sg[i]))
        d2 = float((p[i] - si[i]) @ (p[i] - si[i]))
        total += max(eps_d - d2, 0.0)
    return 0.5 * total


def loop_center_separation(c, margins):
    total = 0.0
    n = c.shape[0]
    for j in range(n):
        for k in range(n):
            if j == k:
                continue
            d2 = float((c[j] - c[k]) @ (c[j] - c[k]))
            total += max(margins[j, k] - d2, 0.0)
    return 0.5 * total


class TestLoopOracles:
    def test_center_loss_random_batch(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(6, 5))
        c = rng.normal(size=(9, 5))
        y = rng.integers(0, 9, size=6)
        got = L.center_loss(t64(x), y, t64(c)).item()
        assert got == pytest.approx(loop_center_loss(x, y, c), rel=1e-9)

    def test_contrastive_center_random_batch(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(7, 4))
        c = rng.normal(size=(5, 4))
        y = rng.integers(0, 5, size=7)
        got = L.contrastive_center_loss(t64(x), y, t64(c), delta=0.7).item()
        assert got == pytest.approx(loop_contrastive_center(x, y, c, 0.7), rel=1e-6)

    def test_attribute_loss_random_batch(self):
        reg = make_registry(d=6, seed=4)
        batch = random_batch(reg, m=5, seed=5, spread=2.0)
        got = L.attribute_loss(batch, reg).item()
        want = loop_attribute_loss(batch.photos.data, batch.genuine.data,
                                   batch.impostor.data, batch.combo,
                                   reg.centers.data, reg.attribute_margin)
        assert got == pytest.approx(want, rel=1e-9)

    def test_identity_loss_random_batch(self):
        reg = make_registry(d=6, seed=6)
        batch = random_batch(reg, m=5, seed=7)
        got = L.identity_loss(batch, reg).item()
        want = loop_identity_loss(batch.photos.data, batch.genuine.data,
                                  batch.impostor.data, reg.identity_margin)
        assert got == pytest.approx(want, rel=1e-9)

    def test_center_separation_paper_preset_scale(self):
        from attrcenter.lattice import paper_schema
        reg = CenterRegistry(paper_schema(), 8, margin_unit=4.0, dtype=np.float64)
        reg.init_centers(seed=2, scale=1.0)
        got = L.center_separation_loss(reg).item()
        want = loop_center_separation(reg.centers.data, reg.margin_matrix)
        assert got == pytest.approx(want, rel=1e-8)

    def test_composite_equals_sum_of_parts(self):
        reg = make_registry(seed=8)
        batch = random_batch(reg, seed=9, spread=1.5)
        bd = L.attribute_centered_loss(batch, reg)
        parts = (L.attribute_loss(batch, reg).item() + L.identity_loss(batch, reg).item()
                 + L.center_separation_loss(reg).item())
        assert bd.total.item() == pytest.approx(parts, rel=1e-6)
        vals = bd.values()
        assert vals["total"] == pytest.approx(vals["attr"] + vals["id"] + vals["cen"], rel=1e-6)

    def test_weights_scale_components(self):
        reg = make_registry(seed=12)
        batch = random_batch(reg, seed=13, spread=1.5)
        bd = L.attribute_centered_loss(batch, reg, weights=(1.0, 0.0, 0.0))
        assert bd.total.item() == pytest.approx(L.attribute_loss(batch, reg).item(), rel=1e-6)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------


class TestProperties:
    @pytest.mark.parametrize("seed", range(5))
    def test_non_negativity(self, seed):
        reg = make_registry(seed=seed, scale=0.5)
        batch = random_batch(reg, seed=seed + 100, spread=2.0)
        assert L.attribute_loss(batch, reg).item() >= 0.0
        assert L.identity_loss(batch, reg).item() >= 0.0
        assert L.center_separation_loss(reg).item() >= 0.0
        assert L.center_loss(batch.photos, batch.combo, reg.centers).item() >= 0.0

    def test_hinge_deadzone_flat_and_zero_gradient(self):
        reg = make_registry(d=4, eps_c=1.0, eps_d=1.5)
        reg.centers.data[...] = 0.0
        inside = 0.1 * np.eye(1, 4)
        base = L.BatchEmbeddings(photos=t64(inside), genuine=t64(inside * 0.5),
                                 impostor=t64(-inside * 3), combo=np.array([0]))
        v0 = L.attribute_loss(base, reg).item()
        nudged = L.BatchEmbeddings(photos=t64(inside + 0.05), genuine=base.genuine,
                                   impostor=base.impostor, combo=np.array([0]))
        assert L.attribute_loss(nudged, reg).item() == v0 == 0.0
        with ad.Tape():
            p = t64(inside, requires_grad=True)
            b = L.BatchEmbeddings(photos=p, genuine=base.genuine, impostor=base.impostor,
                                  combo=np.array([0]))
            ad.backward(L.attribute_loss(b, reg))
        assert not p.grad.any()

    def test_collapse_incentive(self):
        # all centers at one point: identities can sit inside the shared ball
        # (impostors past the identity margin, eps_d < 2 eps_c makes it fit),
        # so without the separation term the loss is exactly zero
        reg = make_registry(d=4, eps1=2.0, eps_c=1.0, eps_d=1.5)
        reg.centers.data[...] = 0.0
        v = 0.9 * np.eye(3, 4)  # pairwise squared distance 1.62 > eps_d, norms 0.81 < eps_c
        batch = L.BatchEmbeddings(photos=t64(v), genuine=t64(v),
                                  impostor=t64(np.roll(v, 1, axis=0)), combo=np.array([0, 1, 2]))
        collapsed = L.attribute_centered_loss(batch, reg, weights=(1.0, 1.0, 0.0))
        assert collapsed.total.item() == 0.0
        with_sep = L.attribute_centered_loss(batch, reg, weights=(1.0, 1.0, 1.0))
        assert with_sep.total.item() > 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_translation_invariance(self, seed):
        reg = make_registry(seed=seed)
        batch = random_batch(reg, seed=seed + 50, spread=1.5)
        shift = np.random.default_rng(seed + 99).normal(size=reg.embedding_dim)

        moved_reg = make_registry(seed=seed)
        moved_reg.centers.data[...] = reg.centers.data + shift
        moved = L.BatchEmbeddings(photos=t64(batch.photos.data + shift),
                                  genuine=t64(batch.genuine.data + shift),
                                  impostor=t64(batch.impostor.data + shift),
                                  combo=batch.combo)
        for fn in (L.attribute_loss, L.identity_loss):
            assert fn(moved, moved_reg).item() == pytest.approx(fn(batch, reg).item(), rel=1e-6, abs=1e-9)
        assert L.center_separation_loss(moved_reg).item() == pytest.approx(
            L.center_separation_loss(reg).item(), rel=1e-6, abs=1e-9)
        assert L.center_loss(moved.photos, moved.combo, moved_reg.centers).item() == pytest.approx(
            L.center_loss(batch.photos, batch.combo, reg.centers).item(), rel=1e-6)

    def test_errors(self):
        reg = make_registry()
        batch = random_batch(reg)
        with pytest.raises(ShapeError):
            L.BatchEmbeddings(photos=batch.photos, genuine=batch.genuine,
                              impostor=t64(np.zeros((2, reg.embedding_dim))), combo=batch.combo)
        with pytest.raises(ShapeError, match="centers"):
            L.contrastive_center_loss(batch.photos, batch.combo[:1],
                                      t64(np.zeros((1, reg.embedding_dim))), delta=1.0)
        with pytest.raises(ValueError):
            L.attribute_centered_loss(batch, reg, weights=(-1.0, 1.0, 1.0))
        bad_y = np.array([reg.n_centers, 0, 0, 0])
        with pytest.raises(ShapeError):
            L.center_loss(batch.photos, bad_y, reg.centers)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _loss_over_flat(loss_name, m=4, d=8, n_states=(3, 2), seed=0):
    """Wrap a loss as a scalar function of one flat vector holding
    (photos, genuine, impostor, centers) so gradcheck can sweep it."""
    reg = make_registry(n_states, d=d, seed=seed)
    n_c = reg.n_centers
    rng = np.random.default_rng(seed + 1000)
    y = rng.integers(0, n_c, size=m)
    labels = rng.integers(0, n_c, size=m)
    logits0 = rng.normal(size=(m, n_c))
    sizes = [m * d, m * d, m * d, n_c * d]

    def fn(flat):
        parts = []
        start = 0
        for sz in sizes:
            parts.append(ad.reshape(ad.gather(ad.reshape(flat, (sum(sizes), 1)),
                                              np.arange(start, start + sz)), (sz,)))
            start += sz
        p = ad.reshape(parts[0], (m, d))
        sg = ad.reshape(parts[1], (m, d))
        si = ad.reshape(parts[2], (m, d))
        centers = ad.reshape(parts[3], (n_c, d))
        batch = L.BatchEmbeddings(photos=p, genuine=sg, impostor=si, combo=y)
        if loss_name == "center":
            return L.center_loss(p, y, centers)
        if loss_name == "joint":
            return L.joint_center_softmax(DiffTensor(logits0), labels, p, y, centers, lam=0.5)
        if loss_name == "contrastive_center":
            return L.contrastive_center_loss(p, y, centers, delta=0.9)
        if loss_name == "attribute":
            return L.attribute_loss(batch, reg, centers=centers)
        if loss_name == "identity":
            return L.identity_loss(batch, reg)
        if loss_name == "separation":
            return L.center_separation_loss(reg, centers=centers)
        if loss_name == "composite":
            return L.attribute_centered_loss(batch, reg, centers=centers).total
        raise ValueError(loss_name)

    point = rng.normal(size=(sum(sizes),))
    return fn, t64(point)


@pytest.mark.parametrize("loss_name", ["center", "joint", "contrastive_center",
                                       "attribute", "identity", "separation", "composite"])
def test_loss_gradcheck(loss_name):
    fn, point = _loss_over_flat(loss_name, seed=3)
    report = ad.gradcheck(fn, point, step=1e-4, tol=1e-3)
    assert report.passed, f"{loss_name}: {report.summary()}"
