import pytest

from cacl.config import RunConfig

TINY = dict(
    num_videos=24, test_fraction=0.34, video_length=14, frame_height=10, frame_width=12, crop=8,
    clip_len=8, stride=1, trunk_channels=(4, 4, 8), feature_dim=8, embed_dim=8, head_hidden=8,
    extractor_channels=(4, 4), token_dim=8, layers=1, heads=2, ffn_dim=16, epochs=2, batch_size=4,
    queue_size=16, pretrain_epochs=1, pretrain_interval=3, pretrain_batch=8, pretrain_queue=16,
    eval_clips=3, attention_clips=4, sdp_probe_draws=1, probe_epochs=10, retrieval_ks=(1, 5),
)


def tiny_config(**changes) -> RunConfig:
    return RunConfig(**{**TINY, **changes})


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    from cacl.train import dataset_from_config

    return dataset_from_config(tiny_config())


_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else "error"
    _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] {number:2d} {title}" + (f" | {detail}" if detail else ""))
