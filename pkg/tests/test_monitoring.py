from prometheus_client import REGISTRY

from app.config import settings
from app.core import monitoring


def rounds_sample(label):
    return REGISTRY.get_sample_value("fedsim_rounds_total", {"algorithm": label})


def accuracy_sample(label):
    return REGISTRY.get_sample_value("fedsim_global_accuracy", {"algorithm": label})


class TestMetricsGating:
    def test_disabled_records_nothing(self, monkeypatch):
        monkeypatch.setattr(settings, "FEDSIM_ENABLE_METRICS", False)
        monitoring.record_round("gated-off", duration=0.1, party_updates=3)
        monitoring.record_accuracy("gated-off", 0.5)
        assert rounds_sample("gated-off") is None
        assert accuracy_sample("gated-off") is None

    def test_enabled_records(self, monkeypatch):
        monkeypatch.setattr(settings, "FEDSIM_ENABLE_METRICS", True)
        monitoring.record_round("gated-on", duration=0.1, party_updates=3)
        monitoring.record_accuracy("gated-on", 0.75)
        assert rounds_sample("gated-on") == 1.0
        assert REGISTRY.get_sample_value("fedsim_party_updates_total", {"algorithm": "gated-on"}) == 3.0
        assert accuracy_sample("gated-on") == 0.75


def test_span_is_a_context_manager():
    with monitoring.span("fedsim.test", round=1):
        pass
