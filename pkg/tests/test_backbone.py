import numpy as np
import pytest

from protopipe.autodiff import AdamState, ShapeError, adam_step
from protopipe.backbone import (
    BackboneSpec,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    SpecError,
    build_backbone,
    clone_for_task,
    embed,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)

MLP_SPEC = BackboneSpec(kind="mlp", input_shape=(16,), hidden_widths=(32,),
                        embed_dim=8, seed=42)


def test_parameter_count_hand_derivation():
    # 16*32 + 32 + 32*8 + 8
    assert parameter_count(MLP_SPEC) == 808


def test_conv4_pool_constraint():
    with pytest.raises(SpecError, match="divisible by 16"):
        BackboneSpec(kind="conv4", input_shape=(1, 8, 8),
                     hidden_widths=(8, 8, 8, 8), embed_dim=4)


def test_same_spec_same_bits():
    a = build_backbone(MLP_SPEC)
    b = build_backbone(MLP_SPEC)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_embed_batch_independence():
    backbone = build_backbone(MLP_SPEC)
    rng = np.random.default_rng(0)
    batch = rng.standard_normal((3, 16))
    full = embed(backbone, batch).data
    single = embed(backbone, batch[:1]).data
    # BLAS may pick different gemm kernels per batch size: ulp-level only
    np.testing.assert_allclose(full[0], single[0], rtol=0, atol=1e-12)


def test_zero_final_layer_annihilates():
    backbone = build_backbone(MLP_SPEC)
    backbone.params["w1"].data[...] = 0.0
    backbone.params["b1"].data[...] = 0.0
    out = embed(backbone, np.random.default_rng(1).standard_normal((4, 16)))
    np.testing.assert_array_equal(out.data, np.zeros((4, 8)))


def test_embed_shape_mismatch():
    backbone = build_backbone(MLP_SPEC)
    with pytest.raises(ShapeError):
        embed(backbone, np.zeros((2, 17)))


def test_checkpoint_roundtrip_bitwise(tmp_path):
    backbone = build_backbone(MLP_SPEC)
    ckpt = backbone.snapshot("random")
    path = tmp_path / "b.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == ckpt.spec
    assert loaded.stage == "random"
    for name in ckpt.params:
        assert loaded.params[name].tobytes() == ckpt.params[name].tobytes()


def test_roundtrip_preserves_embeddings_bitwise(tmp_path):
    backbone = build_backbone(MLP_SPEC)
    batch = np.random.default_rng(7).standard_normal((5, 16))
    golden = embed(backbone, batch).data
    path = tmp_path / "b.ckpt"
    save_checkpoint(backbone.snapshot("random"), path)
    again = embed(clone_for_task(load_checkpoint(path)), batch).data
    assert again.tobytes() == golden.tobytes()


def test_corrupted_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    backbone = build_backbone(MLP_SPEC)
    save_checkpoint(backbone.snapshot("random"), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_version_bump_is_distinct_error(tmp_path):
    path = tmp_path / "v2.ckpt"
    save_checkpoint(build_backbone(MLP_SPEC).snapshot("random"), path)
    blob = bytearray(path.read_bytes())
    blob[4] = 2
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "cut.ckpt"
    save_checkpoint(build_backbone(MLP_SPEC).snapshot("random"), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_shape_disagreement(tmp_path):
    path = tmp_path / "shape.ckpt"
    save_checkpoint(build_backbone(MLP_SPEC).snapshot("random"), path)
    # corrupt the metadata so the spec disagrees with the stored tensors
    blob = path.read_bytes().replace(b'"embed_dim":8', b'"embed_dim":4')
    path.write_bytes(blob)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_clone_isolation_under_optimization():
    backbone = build_backbone(MLP_SPEC)
    ckpt = backbone.snapshot("random")
    frozen = {k: v.copy() for k, v in ckpt.params.items()}
    clone = clone_for_task(ckpt)
    params = clone.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(0)
    for _ in range(10):
        adam_step(params, [rng.standard_normal(p.data.shape) for p in params],
                  state, lr=0.05)
    for name in ckpt.params:
        assert ckpt.params[name].tobytes() == frozen[name].tobytes()
    second = clone_for_task(ckpt)
    for name, tensor in second.params.items():
        assert tensor.data.tobytes() == frozen[name].tobytes()


def test_clone_embeds_like_checkpoint(tmp_path):
    backbone = build_backbone(MLP_SPEC)
    ckpt = backbone.snapshot("metatrained")
    path = tmp_path / "c.ckpt"
    save_checkpoint(ckpt, path)
    batch = np.random.default_rng(9).standard_normal((3, 16))
    a = embed(clone_for_task(ckpt), batch).data
    b = embed(clone_for_task(load_checkpoint(path)), batch).data
    assert a.tobytes() == b.tobytes()


def test_conv4_forward_shape():
    spec = BackboneSpec(kind="conv4", input_shape=(1, 16, 16),
                        hidden_widths=(4, 4, 4, 4), embed_dim=6, seed=0)
    backbone = build_backbone(spec)
    out = embed(backbone, np.random.default_rng(0).random((2, 1, 16, 16)))
    assert out.data.shape == (2, 6)
    assert np.isfinite(out.data).all()
