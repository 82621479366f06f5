import json

import pytest
import torch

from app.checkpoint import load_checkpoint, save_checkpoint, sidecar_path
from app.errors import RejectedInputError


def test_save_and_load_with_sidecar(tmp_path):
    state = {"w": torch.arange(3.0)}
    path = save_checkpoint(tmp_path / "nested" / "model.pt", state, {"seed": 3, "git_describe": "abc"})
    loaded, meta = load_checkpoint(path)
    assert torch.equal(loaded["w"], state["w"])
    assert meta == {"seed": 3, "git_describe": "abc"}
    assert json.loads(sidecar_path(path).read_text()) == meta


def test_git_describe_is_filled_in(tmp_path):
    _, meta = load_checkpoint(save_checkpoint(tmp_path / "m.pt", {}, {}))
    assert isinstance(meta["git_describe"], str) and meta["git_describe"]


def test_missing_or_foreign_file_is_rejected(tmp_path):
    with pytest.raises(RejectedInputError):
        load_checkpoint(tmp_path / "absent.pt")
    foreign = tmp_path / "foreign.pt"
    torch.save([1, 2, 3], foreign)
    with pytest.raises(RejectedInputError):
        load_checkpoint(foreign)
