"""Architecture walkers: torchvision modules in, uap ONNX graphs out.

Each builder reads hyperparameters (strides, pads, eps, head counts)
straight off the torch modules instead of hard-coding them, so minor
torchvision revisions keep working as long as the module tree keeps its
names. All graphs take one float32 input "input" of shape (N, 3, H, W)
with a dynamic batch axis and produce raw logits "logits" of shape
(N, num_classes); softmax stays on the consumer side.
"""

from __future__ import annotations

import math

import numpy as np

from uap.onnx_model import Graph

from .builders import GraphBuilder

INPUT = "input"
LOGITS = "logits"


def _basic_conv(b: GraphBuilder, x: str, mod, tag: str) -> str:
    # torchvision BasicConv2d: bias-free conv, BN(eps=0.001), relu
    x = b.conv(x, mod.conv, f"{tag}.conv")
    x = b.batch_norm(x, mod.bn, f"{tag}.bn")
    return b.relu(x, f"{tag}.relu")


def _inception(b: GraphBuilder, x: str, mod, tag: str) -> str:
    b1 = _basic_conv(b, x, mod.branch1, f"{tag}.b1")
    b2 = _basic_conv(b, _basic_conv(b, x, mod.branch2[0], f"{tag}.b2a"), mod.branch2[1], f"{tag}.b2b")
    b3 = _basic_conv(b, _basic_conv(b, x, mod.branch3[0], f"{tag}.b3a"), mod.branch3[1], f"{tag}.b3b")
    pooled = b.max_pool(x, mod.branch4[0], f"{tag}.pool")
    b4 = _basic_conv(b, pooled, mod.branch4[1], f"{tag}.b4")
    return b.concat([b1, b2, b3, b4], 1, tag)


def build_googlenet(m) -> Graph:
    b = GraphBuilder("googlenet")
    x = INPUT
    if m.transform_input:
        # pretrained weights expect the 0.5/0.5 Caffe-style domain; fold the
        # channel affine the torch forward applies into the graph
        scale = np.array([0.229, 0.224, 0.225], dtype=np.float32) / 0.5
        shift = (np.array([0.485, 0.456, 0.406], dtype=np.float32) - 0.5) / 0.5
        x = b.mul(x, b.init("transform.scale", scale.reshape(1, 3, 1, 1)), "transform.mul")
        x = b.add(x, b.init("transform.shift", shift.reshape(1, 3, 1, 1)), "transform.add")
    x = _basic_conv(b, x, m.conv1, "conv1")
    x = b.max_pool(x, m.maxpool1, "maxpool1")
    x = _basic_conv(b, x, m.conv2, "conv2")
    x = _basic_conv(b, x, m.conv3, "conv3")
    x = b.max_pool(x, m.maxpool2, "maxpool2")
    x = _inception(b, x, m.inception3a, "inception3a")
    x = _inception(b, x, m.inception3b, "inception3b")
    x = b.max_pool(x, m.maxpool3, "maxpool3")
    for name in ("inception4a", "inception4b", "inception4c", "inception4d", "inception4e"):
        x = _inception(b, x, getattr(m, name), name)
    x = b.max_pool(x, m.maxpool4, "maxpool4")
    x = _inception(b, x, m.inception5a, "inception5a")
    x = _inception(b, x, m.inception5b, "inception5b")
    x = b.node("GlobalAveragePool", [x], "avgpool")
    x = b.node("Flatten", [x], "flatten", axis=1)
    b.gemm(x, m.fc, "fc", out=LOGITS)
    return b.finish(INPUT, ("N", 3, 224, 224), LOGITS, ("N", m.fc.out_features))


def build_resnet50(m) -> Graph:
    b = GraphBuilder("resnet50")
    x = b.conv(INPUT, m.conv1, "conv1")
    x = b.batch_norm(x, m.bn1, "bn1")
    x = b.relu(x, "relu1")
    x = b.max_pool(x, m.maxpool, "maxpool")
    for li, layer in enumerate((m.layer1, m.layer2, m.layer3, m.layer4), start=1):
        for bi, block in enumerate(layer):
            tag = f"layer{li}.{bi}"
            identity = x
            y = b.conv(x, block.conv1, f"{tag}.conv1")
            y = b.relu(b.batch_norm(y, block.bn1, f"{tag}.bn1"), f"{tag}.relu1")
            y = b.conv(y, block.conv2, f"{tag}.conv2")
            y = b.relu(b.batch_norm(y, block.bn2, f"{tag}.bn2"), f"{tag}.relu2")
            y = b.batch_norm(b.conv(y, block.conv3, f"{tag}.conv3"), block.bn3, f"{tag}.bn3")
            if block.downsample is not None:
                identity = b.conv(x, block.downsample[0], f"{tag}.down")
                identity = b.batch_norm(identity, block.downsample[1], f"{tag}.downbn")
            x = b.relu(b.add(y, identity, f"{tag}.sum"), f"{tag}.out")
    x = b.node("GlobalAveragePool", [x], "avgpool")
    x = b.node("Flatten", [x], "flatten", axis=1)
    b.gemm(x, m.fc, "fc", out=LOGITS)
    return b.finish(INPUT, ("N", 3, 224, 224), LOGITS, ("N", m.fc.out_features))


def _encoder_block(b: GraphBuilder, x: str, blk, tag: str, seq: int, heads: int, head_dim: int) -> str:
    sa = blk.self_attention
    hidden = heads * head_dim
    h = b.layer_norm(x, blk.ln_1, f"{tag}.ln1")
    ipw = sa.in_proj_weight.detach().cpu().numpy()
    ipb = sa.in_proj_bias.detach().cpu().numpy()
    parts = []
    for j, pname in enumerate(("q", "k", "v")):
        # the packed qkv projection pre-sliced into three MatMuls
        w = ipw[j * hidden : (j + 1) * hidden]
        wt = b.init(f"{tag}.{pname}w", np.ascontiguousarray(w.T))
        y = b.node("MatMul", [h, wt], f"{tag}.{pname}mm")
        parts.append(b.add(y, b.init(f"{tag}.{pname}b", ipb[j * hidden : (j + 1) * hidden]), f"{tag}.{pname}"))
    q, k, v = parts
    q = b.mul(q, b.floats(f"{tag}.scale", [1.0 / math.sqrt(head_dim)]), f"{tag}.qs")

    def split(val: str, pname: str, perm: tuple) -> str:
        r = b.reshape(val, [0, seq, heads, head_dim], f"{tag}.{pname}r")
        return b.transpose(r, perm, f"{tag}.{pname}t")

    qh = split(q, "qh", (0, 2, 1, 3))
    kh = split(k, "kh", (0, 2, 3, 1))
    vh = split(v, "vh", (0, 2, 1, 3))
    scores = b.node("MatMul", [qh, kh], f"{tag}.scores")
    attn = b.softmax(scores, f"{tag}.attn", axis=-1)
    ctx = b.node("MatMul", [attn, vh], f"{tag}.ctx")
    ctx = b.transpose(ctx, (0, 2, 1, 3), f"{tag}.ctxt")
    ctx = b.reshape(ctx, [0, seq, hidden], f"{tag}.merge")
    proj = b.token_linear(ctx, sa.out_proj.weight, sa.out_proj.bias, f"{tag}.proj")
    x = b.add(x, proj, f"{tag}.res1")

    h2 = b.layer_norm(x, blk.ln_2, f"{tag}.ln2")
    h2 = b.token_linear(h2, blk.mlp[0].weight, blk.mlp[0].bias, f"{tag}.fc1")
    h2 = b.gelu(h2, f"{tag}.gelu")
    h2 = b.token_linear(h2, blk.mlp[3].weight, blk.mlp[3].bias, f"{tag}.fc2")
    return b.add(x, h2, f"{tag}.res2")


def build_vit_b_16(m) -> Graph:
    b = GraphBuilder("vit_b_16")
    hidden = m.conv_proj.out_channels
    image = int(m.image_size)
    seq = int(m.encoder.pos_embedding.shape[1])  # patch tokens plus the class token
    tokens = seq - 1
    sa0 = m.encoder.layers[0].self_attention
    heads = int(sa0.num_heads)
    head_dim = hidden // heads

    x = b.conv(INPUT, m.conv_proj, "patch")
    x = b.reshape(x, [0, hidden, tokens], "tokens")
    x = b.transpose(x, (0, 2, 1), "tokens_nlc")
    # class token must repeat per image: zero out one real token slot and
    # broadcast-add the (1, 1, hidden) parameter onto it
    first = b.slice_axis(x, 1, 0, 1, "cls.seed")
    zeros = b.mul(first, b.floats("cls.zero", [0.0]), "cls.zeros")
    cls = b.add(zeros, b.tensor("cls.token", m.class_token), "cls.tile")
    x = b.concat([cls, x], 1, "with_cls")
    x = b.add(x, b.tensor("pos_embedding", m.encoder.pos_embedding), "pos")
    for i, blk in enumerate(m.encoder.layers):
        x = _encoder_block(b, x, blk, f"block{i}", seq, heads, head_dim)
    x = b.layer_norm(x, m.encoder.ln, "final_ln")
    x = b.slice_axis(x, 1, 0, 1, "cls.out")
    x = b.squeeze(x, [1], "cls.vec")
    b.gemm(x, m.heads.head, "head", out=LOGITS)
    return b.finish(INPUT, ("N", 3, image, image), LOGITS, ("N", m.heads.head.out_features))
