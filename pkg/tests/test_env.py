import gzip
import struct

import numpy as np
import pytest

from viigl.env import (
    Dataset,
    FeedbackSpec,
    MnistEnv,
    Sample,
    SyntheticEnv,
    UniformPolicy,
    collect,
    feedback_class,
    letter_stand_ins,
    load_idx,
    load_mnist,
    make_synthetic_env,
    read_idx,
    write_idx,
)
from viigl.errors import ConfigError, ContractError, FormatError

F_CLASS, T_CLASS = 10, 11


def hand_idx(path, array, magic):
    """IDX bytes assembled field by field, independent of write_idx."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for d in array.shape:
            fh.write(struct.pack(">I", d))
        fh.write(array.tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    labels = np.array([3, 0, 9, 3], dtype=np.uint8)
    hand_idx(tmp_path / "img", images, 0x00000803)
    hand_idx(tmp_path / "lbl", labels, 0x00000801)
    return tmp_path, images, labels


def tiny_mnist(rng, per_digit=3):
    labels = np.repeat(np.arange(10), per_digit)
    images = np.zeros((len(labels), 16))
    images[np.arange(len(labels)), labels] = 1.0
    images += rng.uniform(0, 0.01, size=images.shape)
    f = np.full((2, 16), 0.5)
    t = np.full((2, 16), 0.9)
    return images, labels, (f, t)


class TestIdx:
    def test_four_image_fixture(self, idx_pair):
        path, images, labels = idx_pair
        x, l = load_idx(path / "img", path / "lbl")
        assert x.shape == (4, 784)
        np.testing.assert_array_equal(l, labels)
        np.testing.assert_allclose(x[2].reshape(28, 28) * 255, images[2])
        assert x.min() >= 0 and x.max() <= 1

    def test_write_round_trip_and_gzip(self, tmp_path):
        arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        write_idx(tmp_path / "a.gz", arr)
        np.testing.assert_array_equal(read_idx(tmp_path / "a.gz"), arr)
        hand_idx(tmp_path / "b", arr, 0x00000803)
        write_idx(tmp_path / "c", arr)
        assert (tmp_path / "b").read_bytes() == (tmp_path / "c").read_bytes()

    def test_bad_magic(self, tmp_path):
        hand_idx(tmp_path / "bad", np.zeros((2, 2, 2)), 0x00000903)
        with pytest.raises(FormatError) as err:
            read_idx(tmp_path / "bad")
        assert err.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        hand_idx(tmp_path / "t", np.zeros((3, 4, 4)), 0x00000803)
        raw = (tmp_path / "t").read_bytes()
        (tmp_path / "t").write_bytes(raw[:-5])
        with pytest.raises(FormatError) as err:
            read_idx(tmp_path / "t")
        assert err.value.offset == len(raw) - 5

    def test_swapped_files(self, idx_pair):
        path, _, _ = idx_pair
        with pytest.raises(FormatError):
            load_idx(path / "lbl", path / "img")

    def test_count_mismatch(self, tmp_path):
        hand_idx(tmp_path / "img", np.zeros((3, 2, 2)), 0x00000803)
        hand_idx(tmp_path / "lbl", np.zeros(2), 0x00000801)
        with pytest.raises(FormatError):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_mnist_names(self, tmp_path):
        hand_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((2, 28, 28)), 0x00000803)
        with gzip.open(tmp_path / "train-labels-idx1-ubyte.gz", "wb") as fh:
            fh.write(struct.pack(">II", 0x00000801, 2) + bytes([1, 7]))
        x, l = load_mnist(tmp_path)
        assert x.shape == (2, 784)
        np.testing.assert_array_equal(l, [1, 7])
        with pytest.raises(FileNotFoundError):
            load_mnist(tmp_path, "test")


class TestFeedbackClass:
    def test_correct_guess_noiseless(self):
        assert feedback_class("none", True, 5, 5, 1, 10) == 1

    def test_action_noise_correct_guess(self):
        assert feedback_class("A", True, 5, 5, 1, 10) == 8

    def test_context_noise_wrong_guess(self):
        assert feedback_class("C", True, 5, 6, 0, 10) == 2

    def test_table_rows(self):
        # l_x = 5; wrong guesses a = 6 and a = 0, right guess a = 5
        rows = {
            ("I", 6, 0): F_CLASS, ("I", 5, 1): T_CLASS,
            ("A", 6, 0): 3, ("A", 0, 0): 7, ("A", 5, 1): 8,
            ("C", 6, 0): 2, ("C", 0, 0): 2, ("C", 5, 1): 8,
            ("CA", 6, 0): 8, ("CA", 0, 0): 2, ("CA", 5, 1): 3,
        }
        for (noise, a, r), expect in rows.items():
            assert feedback_class(noise, True, 5, a, r, 10) == expect, (noise, a)
            assert feedback_class(noise, False, 5, a, r, 10) == r

    def test_synthetic_action_noise_index(self):
        env = SyntheticEnv(4, 4, 3, FeedbackSpec("A", 1.0))
        assert feedback_class("A", True, 1, 2, 0, env.num_digits) == (2 - 3) % 4

    def test_vectorised(self):
        out = feedback_class("CA", np.array([True, False]), np.array([1, 2]), np.array([4, 2]),
                             np.array([0, 1]), 10)
        np.testing.assert_array_equal(out, [2, 1])

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            FeedbackSpec("B", 0.1)
        with pytest.raises(ConfigError):
            FeedbackSpec("A", 1.5)
        assert FeedbackSpec("none", 0.7).effective_level == 0.0


class TestSynthetic:
    def test_noiseless_prototype_is_reward(self):
        env = make_synthetic_env(4, 4, 6)
        rng = np.random.default_rng(0)
        for x in range(4):
            for a in range(4):
                r, y = env.step(x, a, rng)
                assert r == int(a == x % 4)
                dists = np.linalg.norm(env.prototypes - y, axis=1)
                assert int(np.argmin(dists)) == r

    def test_jitter_scale(self):
        env = SyntheticEnv(3, 3, 50, seed=1)
        draws = env.draw_feedback(np.zeros(4000, dtype=int), np.random.default_rng(2))
        assert np.std(draws - env.prototypes[0]) == pytest.approx(0.05, rel=0.02)

    def test_action_range_checked(self):
        env = make_synthetic_env(4, 4, 3)
        with pytest.raises(ContractError):
            env.step(0, 4, np.random.default_rng(0))

    def test_noise_frequency(self):
        env = SyntheticEnv(10, 10, 4, FeedbackSpec("C", 0.1))
        rng = np.random.default_rng(123)
        idx = rng.integers(0, 10, size=100_000)
        _, _, noisy = env.step_batch(idx, rng.integers(0, 10, size=100_000), rng)
        assert abs(noisy.mean() - 0.1) <= 0.005

    @pytest.mark.parametrize("noise", ["none", "I"])
    def test_ci_holds(self, noise):
        env = SyntheticEnv(6, 3, 4, FeedbackSpec(noise, 0.2))
        assert env.enumerate_joint().cmi_y_xa_given_r() <= 1e-12

    @pytest.mark.parametrize("noise", ["A", "C", "CA"])
    def test_ci_violated(self, noise):
        env = SyntheticEnv(6, 3, 4, FeedbackSpec(noise, 0.2))
        assert env.enumerate_joint().cmi_y_xa_given_r() > 1e-6

    def test_enumerated_joint_matches_sampling(self):
        env = SyntheticEnv(4, 3, 4, FeedbackSpec("CA", 0.3))
        joint = env.enumerate_joint().table
        rng = np.random.default_rng(4)
        n = 200_000
        idx = rng.integers(0, 4, size=n)
        acts = rng.integers(0, 3, size=n)
        r = (acts == env.context_labels[idx]).astype(int)
        noisy = rng.random(n) < 0.3
        cls = feedback_class("CA", noisy, env.context_labels[idx], acts, r, 3)
        counts = np.zeros_like(joint)
        np.add.at(counts, (idx, acts, r, cls), 1)
        assert np.max(np.abs(counts / n - joint)) < 0.004

    def test_seeded_prototypes(self):
        a = SyntheticEnv(3, 3, 5, seed=7).prototypes
        b = SyntheticEnv(3, 3, 5, seed=7).prototypes
        c = SyntheticEnv(3, 3, 5, seed=8).prototypes
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_too_small(self):
        with pytest.raises(ConfigError):
            SyntheticEnv(1, 3, 3)


class TestMnistEnv:
    def test_feedback_images_from_right_pool(self):
        rng = np.random.default_rng(0)
        images, labels, letters = tiny_mnist(rng)
        env = MnistEnv(images, labels, FeedbackSpec("I", 1.0), letters)
        r, y = env.step(labels.tolist().index(4), 4, rng)
        assert r == 1
        assert np.all(y == 0.9)
        r, y = env.step(labels.tolist().index(4), 2, rng)
        assert r == 0 and np.all(y == 0.5)

    def test_noiseless_shows_digit_of_reward(self):
        rng = np.random.default_rng(1)
        images, labels, letters = tiny_mnist(rng)
        env = MnistEnv(images, labels, None, letters)
        _, y = env.step(0, int(labels[0]), rng)
        assert int(np.argmax(y)) == 1

    def test_letter_stand_ins_distinct(self):
        f, t = letter_stand_ins(np.random.default_rng(0), count=8)
        assert f.shape == t.shape == (8, 784)
        assert np.linalg.norm(f.mean(0) - t.mean(0)) > 5

    def test_missing_test_split(self):
        rng = np.random.default_rng(2)
        images, labels, letters = tiny_mnist(rng)
        with pytest.raises(FileNotFoundError):
            MnistEnv(images, labels, letters=letters).test_contexts(5, rng)


class TestDataset:
    def make(self, K=500, seed=0):
        env = SyntheticEnv(5, 3, 4, FeedbackSpec("A", 0.2), seed=1)
        return env, collect(env, UniformPolicy(3), K, seed)

    def test_reward_hiding(self):
        _, ds = self.make()
        s = ds[0]
        assert isinstance(s, Sample)
        assert set(vars(s)) == {"x", "a", "y"}
        assert not hasattr(s, "r")
        r = ds.reveal_rewards()
        np.testing.assert_array_equal(r, (ds.a == ds.reveal_labels()).astype(int))

    def test_propensity_and_determinism(self):
        _, a = self.make(seed=3)
        _, b = self.make(seed=3)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_allclose(a.propensity, 1 / 3)
        _, c = self.make(seed=4)
        assert not np.array_equal(a.a, c.a)

    def test_csv_round_trip(self, tmp_path):
        _, ds = self.make(K=50)
        ds.save_csv(tmp_path / "d.csv")
        back = Dataset.load_csv(tmp_path / "d.csv")
        for name in ("x", "a", "y", "propensity"):
            np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
        np.testing.assert_array_equal(back.reveal_rewards(), ds.reveal_rewards())
        assert back.meta["noise"] == "A"
        assert back.num_actions == 3

    def test_csv_shape_checked(self, tmp_path):
        _, ds = self.make(K=5)
        ds.save_csv(tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        (tmp_path / "d.csv").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(FormatError):
            Dataset.load_csv(tmp_path / "d.csv")

    def test_subset_and_iter(self):
        _, ds = self.make(K=20)
        sub = ds.subset(np.arange(5))
        assert len(sub) == 5
        assert [s.a for s in sub] == list(ds.a[:5])

    def test_k_validated(self):
        env, _ = self.make(K=1)
        with pytest.raises(ContractError):
            collect(env, UniformPolicy(3), 0, 0)
