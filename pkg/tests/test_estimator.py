import numpy as np
import pytest
from sklearn.base import clone

from oarkit import OnlineActionRecognizer
from oarkit.synth import DatasetSpec, read_manifest, synthesize_dataset
from oarkit.validation import check_fraction, check_labels, check_streams

FAST = dict(max_iters=1, epochs_per_test=1, samples_per_clip=2)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("est")
    # classes 0..2 but only two clips each, 12 frames
    synthesize_dataset(DatasetSpec(num_classes=3, clips_per_class=2, frames_per_clip=12, seed=9), root)
    return root


def test_get_params_and_clone():
    clf = OnlineActionRecognizer(theta=0.05, random_state=3)
    params = clf.get_params()
    assert params["theta"] == 0.05 and params["random_state"] == 3 and params["tau"] == 2
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    clf.set_params(tau=3)
    assert clf.tau == 3


@pytest.mark.parametrize("kw", [{"theta": 0}, {"learning_rate": -1}, {"val_fraction": 1.0}, {"policy": "eager"},
                                {"exit_threshold": 1.5}])
def test_bad_params_raise_on_fit(kw, data):
    with pytest.raises(ValueError):
        OnlineActionRecognizer(**kw).fit(data)


def test_input_validation(tmp_path):
    with pytest.raises(ValueError):
        check_streams(None)
    with pytest.raises(ValueError):
        check_streams([])
    with pytest.raises(FileNotFoundError):
        check_streams([tmp_path / "nope.oar"])
    with pytest.raises(TypeError):
        check_streams([3.5])
    with pytest.raises(ValueError):
        check_labels([[1, 2]], 1)
    with pytest.raises(ValueError):
        check_labels([1, 2], 3)
    with pytest.raises(ValueError):
        check_fraction(0.0, "p", closed=False)


def test_predict_before_fit(data):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        OnlineActionRecognizer().predict(data)


def test_fit_predict_transform(data):
    clf = OnlineActionRecognizer(random_state=0, **FAST).fit(data)
    assert clf.classes_.tolist() == [0, 1, 2]
    pred = clf.predict(data)
    assert pred.shape == (6,) and set(pred) <= {0, 1, 2}
    feats = clf.transform(data)
    assert feats.shape == (6, 4)
    assert (feats[:, 1:] <= feats[:, :1]).all() and (feats[:, 0] >= 1).all()
    assert 0.0 <= clf.score(data, [e["label"] for e in read_manifest(data)["clips"]]) <= 1.0
    again = OnlineActionRecognizer(random_state=0, **FAST).fit(data)
    assert again.model_.to_bytes() == clf.model_.to_bytes()


def test_custom_labels_and_bytes_input(data):
    paths = [data / e["path"] for e in read_manifest(data)["clips"]]
    y = np.array(["walk", "run"] * 3)
    clf = OnlineActionRecognizer(random_state=1, **FAST).fit(paths, y)
    assert clf.classes_.tolist() == ["run", "walk"]
    assert set(clf.predict([p.read_bytes() for p in paths[:2]])) <= {"run", "walk"}
    with pytest.raises(ValueError):
        OnlineActionRecognizer(**FAST).fit(paths, ["a"] * 6)
