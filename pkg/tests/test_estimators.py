import numpy as np
import pytest
from sklearn.base import clone

from repshift import (
    PruneSchedule,
    PrunePlanEntry,
    ScheduleEntry,
    TokenPruningClassifier,
    check_image_batch,
    save_bundle,
)
from repshift.errors import DimensionError


class TestValidation:
    def test_accepts_single_image(self):
        x = np.zeros((4, 4, 3), dtype=np.float32)
        out = check_image_batch(x, (4, 4))
        assert out.shape == (1, 4, 4, 3)

    def test_rejects_wrong_size(self):
        with pytest.raises(DimensionError):
            check_image_batch(np.zeros((2, 5, 4, 3)), (4, 4))

    def test_rejects_non_finite(self):
        x = np.full((1, 4, 4, 3), np.nan)
        with pytest.raises(DimensionError):
            check_image_batch(x, (4, 4))


class TestClassifier:
    def test_sklearn_contract(self, vit_bundle):
        clf = TokenPruningClassifier(bundle=vit_bundle, mode="baseline")
        params = clf.get_params()
        assert params["mode"] == "baseline"
        cloned = clone(clf)
        assert cloned.get_params()["tile_size"] == 64
        clf.set_params(tile_size=32)
        assert clf.get_params()["tile_size"] == 32

    def test_fit_returns_self_and_predicts(self, vit_bundle, vit_fixture):
        clf = TokenPruningClassifier(bundle=vit_bundle)
        assert clf.fit() is clf
        preds = clf.predict(vit_fixture.images[:10])
        assert preds.shape == (10,)
        assert clf.score(vit_fixture.images[:10], vit_fixture.labels[:10]) >= 0.9

    def test_decision_function_shape(self, vit_bundle, vit_fixture):
        clf = TokenPruningClassifier(bundle=vit_bundle).fit()
        logits = clf.decision_function(vit_fixture.images[:3])
        assert logits.shape == (3, 2)
        assert np.isfinite(logits).all()

    def test_pruning_schedule_param(self, vit_bundle, vit_fixture):
        sched = PruneSchedule(entries=(ScheduleEntry(layer=0, ratio=0.5),))
        clf = TokenPruningClassifier(bundle=vit_bundle, schedule=sched,
                                     mode="rep_shift").fit()
        assert clf.score(vit_fixture.images, vit_fixture.labels) >= 0.9

    def test_unfitted_raises(self, vit_bundle):
        clf = TokenPruningClassifier(bundle=vit_bundle)
        with pytest.raises(ValueError):
            clf.predict(np.zeros((1, 64, 64, 3), dtype=np.float32))

    def test_missing_bundle_raises(self):
        with pytest.raises(ValueError):
            TokenPruningClassifier().fit()

    def test_bundle_from_path(self, vit_bundle, vit_fixture, tmp_path):
        path = tmp_path / "m.rswc"
        save_bundle(vit_bundle, path)
        clf = TokenPruningClassifier(bundle=str(path)).fit()
        assert clf.score(vit_fixture.images[:6], vit_fixture.labels[:6]) >= 0.9

    def test_cnn_bundle(self, cnn_bundle, cnn_fixture):
        plan = (PrunePlanEntry(stage=0, drop_rows=2, drop_cols=2),)
        clf = TokenPruningClassifier(bundle=cnn_bundle, prune_plan=plan).fit()
        assert clf.score(cnn_fixture.images[:10], cnn_fixture.labels[:10]) >= 0.9
