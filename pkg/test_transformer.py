"""
Model construction, tagging, precision validation, width slicing and checkpoints.
"""
import struct

import pytest
import torch

from bitsplit.exceptions import CheckpointFormatError, ConfigurationError, ShapeError, UnknownTagError
from bitsplit.schemas import QuantConfig, QuantScheme
from bitsplit.splitting import split_model
from bitsplit.transformer import (
    CHECKPOINT_MAGIC,
    Part,
    PartTag,
    activation_sites,
    build,
    decode_checkpoint,
    encode_checkpoint,
    full_precision,
    init_from_wider,
    matrix_names,
    matrix_shape,
    matrix_tag,
    packed_weight_bytes,
    parameters_by_tag,
    read_checkpoint_header,
    resolve_modules,
    set_quantization,
    uniform_precision,
)


def test_matrix_names_and_shapes(tiny_spec):
    names = matrix_names(tiny_spec)
    assert len(names) == 6 * tiny_spec.num_layers + 2
    assert names[0] == "embedding" and names[-1] == "pooler"
    assert matrix_shape(tiny_spec, "embedding") == (64 + 16 + 2, 16)
    half = tiny_spec.at_width(0.5)
    assert matrix_shape(half, "layer1.query") == (8, 16)
    assert matrix_shape(half, "layer0.ffn_out") == (16, 16)


def test_matrix_tags():
    assert matrix_tag("layer1.key") == PartTag(Part.MHA_QK, 1)
    assert matrix_tag("layer0.attn_out") == PartTag(Part.MHA_O, 0)
    assert matrix_tag("pooler") == PartTag(Part.POOLER)
    assert PartTag.parse("FFN-Mid@1") == PartTag(Part.FFN_MID, 1)
    assert str(PartTag(Part.MHA_V, 2)) == "MHA-V@2"
    with pytest.raises(UnknownTagError):
        matrix_tag("layer0.gate")
    with pytest.raises(UnknownTagError):
        PartTag.parse("Attention@0")


def test_forward_shapes(tiny_spec, token_batch):
    model = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.ternary()), dropout=0.0)
    out = model(token_batch.input_ids, token_batch.token_type_ids)
    batch, seq_len = token_batch.input_ids.shape
    assert out.logits.shape == (batch, 2)
    assert out.intermediates.embedding.shape == (batch, seq_len, tiny_spec.hidden)
    assert len(out.intermediates.attention) == tiny_spec.num_layers
    assert len(out.intermediates.ffn) == tiny_spec.num_layers


def test_forward_rejects_bad_tokens(tiny_spec):
    model = build(tiny_spec, full_precision(tiny_spec))
    with pytest.raises(ShapeError):
        model(torch.ones(2, tiny_spec.max_seq_len + 1, dtype=torch.long))
    with pytest.raises(ShapeError):
        model(torch.full((2, 4), tiny_spec.vocab, dtype=torch.long))
    with pytest.raises(ShapeError):
        model(torch.ones(4, dtype=torch.long))


def test_activation_sites_count(tiny_spec):
    model = build(tiny_spec, full_precision(tiny_spec), QuantConfig(activation_bits=8))
    assert len(activation_sites(model)) == 8 * tiny_spec.num_layers + 1
    model = build(tiny_spec, full_precision(tiny_spec), QuantConfig(activation_bits=32))
    assert activation_sites(model) == []


def test_precision_validation(tiny_spec):
    precision = full_precision(tiny_spec)
    del precision["pooler"]
    with pytest.raises(ConfigurationError):
        build(tiny_spec, precision)

    precision = full_precision(tiny_spec)
    precision["layer0.query"] = QuantScheme.binary("row")
    with pytest.raises(ConfigurationError):
        build(tiny_spec, precision)

    precision = full_precision(tiny_spec)
    precision["layer9.query"] = QuantScheme.binary()
    with pytest.raises(ConfigurationError):
        build(tiny_spec, precision)


def test_uniform_precision_quantizes_embedding_by_row(tiny_spec):
    precision = uniform_precision(tiny_spec, QuantScheme.binary())
    assert precision["embedding"].granularity == "row"
    assert precision["pooler"].granularity == "matrix"


def test_tag_groups(tiny_spec):
    model = build(tiny_spec, full_precision(tiny_spec))
    groups = parameters_by_tag(model)
    assert len(groups) == 5 * tiny_spec.num_layers + 2
    assert len(groups[PartTag(Part.MHA_QK, 0)]) == 2
    assert len(resolve_modules(model, "MHA-QK@1")) == 2
    assert resolve_modules(model, "layer1.value")[0].name == "layer1.value"
    with pytest.raises(UnknownTagError):
        resolve_modules(model, "MHA-QK@7")


def test_set_quantization_toggles_weights(tiny_spec):
    model = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.binary()))
    module = model.matrices()["layer0.ffn_mid"]
    assert not torch.equal(module.effective_weight(), module.branches[0].detach())
    set_quantization(model, False)
    assert torch.equal(module.effective_weight(), module.branches[0].detach())


def test_init_from_wider_slices_leading_heads(tiny_spec):
    teacher = build(tiny_spec, full_precision(tiny_spec))
    half = tiny_spec.at_width(0.5)
    student = init_from_wider(build(half, uniform_precision(half, QuantScheme.ternary())), teacher)
    a, f = half.attention_dim, half.inner_dim

    t_layer, s_layer = teacher.layers[1], student.layers[1]
    assert torch.equal(s_layer.attention.query.branches[0], t_layer.attention.query.branches[0][:a])
    assert torch.equal(s_layer.attention.query.bias, t_layer.attention.query.bias[:a])
    assert torch.equal(s_layer.attention.attn_out.branches[0], t_layer.attention.attn_out.branches[0][:, :a])
    assert torch.equal(s_layer.ffn.ffn_out.branches[0], t_layer.ffn.ffn_out.branches[0][:, :f])
    assert torch.equal(student.embedding.branches[0], teacher.embedding.branches[0])
    assert torch.equal(student.classifier.weight, teacher.classifier.weight)


def test_init_from_wider_rejects_wider_student(tiny_spec):
    teacher = build(tiny_spec.at_width(0.5), full_precision(tiny_spec.at_width(0.5)))
    with pytest.raises(ShapeError):
        init_from_wider(build(tiny_spec, full_precision(tiny_spec)), teacher)


def test_checkpoint_round_trip(tiny_spec, token_batch):
    model = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.ternary()), QuantConfig(activation_bits=32), 0.0)
    data = encode_checkpoint(model, "pred-distil-ternary")
    restored, stage = decode_checkpoint(data)

    assert stage == "pred-distil-ternary"
    assert restored.precision == model.precision
    for key, value in model.state_dict().items():
        assert torch.allclose(restored.state_dict()[key], value, atol=1e-6), key
    model.eval()
    restored.eval()
    with torch.no_grad():
        before = model(token_batch.input_ids, token_batch.token_type_ids).logits
        after = restored(token_batch.input_ids, token_batch.token_type_ids).logits
    assert torch.allclose(before, after, atol=1e-4)


def test_checkpoint_keeps_split_pairs(tiny_spec):
    ternary = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.ternary()), QuantConfig(activation_bits=32))
    restored, _ = decode_checkpoint(encode_checkpoint(split_model(ternary), "split-finetune"))
    assert all(module.is_pair for module in restored.matrices().values())
    assert restored.precision["layer0.query"].kind == "binary"


def test_checkpoint_header(tiny_spec):
    model = build(tiny_spec, uniform_precision(tiny_spec, QuantScheme.binary()))
    data = encode_checkpoint(model, "teacher")
    assert data[:4] == CHECKPOINT_MAGIC
    header, base = read_checkpoint_header(data)
    assert header["format"] == "bitsplit-checkpoint"
    assert header["branches"]["pooler"] == 1
    assert base < len(data)
    assert len(header["packed"]) == len(matrix_names(tiny_spec))
    assert packed_weight_bytes(data) > 0
    full = encode_checkpoint(build(tiny_spec, full_precision(tiny_spec)), "teacher")
    assert packed_weight_bytes(full) == 0


def test_checkpoint_rejects_corrupt_data(tiny_spec):
    data = encode_checkpoint(build(tiny_spec, full_precision(tiny_spec)), "teacher")
    with pytest.raises(CheckpointFormatError):
        read_checkpoint_header(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint_header(data[:6])
    _, _, header_len = struct.unpack_from("<4sII", data)
    with pytest.raises(CheckpointFormatError):
        read_checkpoint_header(struct.pack("<4sII", CHECKPOINT_MAGIC, 99, header_len) + data[12:])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(data[:len(data) // 2])
