"""Analytic vs finite-difference gradients of every loss, and gradient flow in prompt fitting."""

import pytest
import torch
from torch.autograd import gradcheck

from src.encoders import similarity_matrix
from src.losses import (
    loss_i2t,
    loss_i2tce,
    loss_id,
    loss_stage1,
    loss_t2i,
    loss_t2i_multipos,
    loss_t2ice_averaged,
    loss_triplet,
)
from src.pipeline import build_model
from src.training import _set_trainable

INSTANCES = 100
TOLERANCE = {"eps": 1e-6, "atol": 1e-8, "rtol": 1e-4}


def _double(*shape, generator):
    return torch.randn(*shape, generator=generator, dtype=torch.float64).requires_grad_(True)


class ToyEncoder(torch.nn.Module):
    """Linear map into the joint space, in double precision."""

    def __init__(self, generator):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.randn(5, 4, generator=generator, dtype=torch.float64))

    def forward(self, x):
        return x @ self.weight


class TestGradients:
    """Central differences against autograd on random small instances."""

    @pytest.mark.parametrize("loss", [loss_i2t, loss_t2i])
    def test_contrastive(self, loss):
        """Test the square contrastive losses composed through cosine similarity."""
        generator = torch.Generator().manual_seed(0)
        for _ in range(INSTANCES):
            v, t = _double(4, 3, generator=generator), _double(4, 3, generator=generator)
            assert gradcheck(lambda a, b: loss(similarity_matrix(a, b, 5.0)), (v, t), **TOLERANCE)

    def test_multipositive(self):
        """Test the multi-positive loss with repeated identities."""
        generator = torch.Generator().manual_seed(1)
        labels = torch.tensor([0, 0, 1, 2, 2])
        for _ in range(INSTANCES):
            s = _double(5, 5, generator=generator)
            assert gradcheck(lambda x: loss_t2i_multipos(x, labels), (s,), **TOLERANCE)

    def test_identity(self):
        """Test the label-smoothed identity loss."""
        generator = torch.Generator().manual_seed(2)
        labels = torch.tensor([0, 3, 1])
        for _ in range(INSTANCES):
            scores = _double(3, 4, generator=generator)
            assert gradcheck(lambda x: loss_id(x, labels, 0.1), (scores,), **TOLERANCE)

    def test_triplet(self):
        """Test batch-hard triplet; random points make the hardest pairs unique."""
        generator = torch.Generator().manual_seed(3)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        for _ in range(INSTANCES):
            features = _double(6, 3, generator=generator)
            assert gradcheck(lambda x: loss_triplet(x, labels, 5.0), (features,), **TOLERANCE)

    def test_i2tce_through_encoder(self):
        """Test the all-identity cross-entropy composed through a toy image encoder."""
        generator = torch.Generator().manual_seed(4)
        labels = torch.tensor([1, 0, 2])
        for _ in range(INSTANCES):
            encoder = ToyEncoder(generator)
            images = torch.randn(3, 5, generator=generator, dtype=torch.float64)
            anchors = torch.randn(3, 4, generator=generator, dtype=torch.float64)

            def loss(weight):
                return loss_i2tce(similarity_matrix(images @ weight, anchors, 3.0), labels, 3, 0.1)

            assert gradcheck(loss, (encoder.weight,), **TOLERANCE)

    def test_averaged(self):
        """Test the averaged text-to-image loss with gradients into the text side."""
        generator = torch.Generator().manual_seed(5)
        labels = torch.tensor([2, 0])
        for _ in range(INSTANCES):
            means = torch.randn(3, 4, generator=generator, dtype=torch.float64)
            text = _double(2, 4, generator=generator)
            assert gradcheck(
                lambda t: loss_t2ice_averaged(similarity_matrix(means, t, 3.0), labels), (text,), **TOLERANCE
            )


class TestPromptGradientFlow:
    """Stage-1 backward pass through the real image and text encoders."""

    @pytest.fixture
    def backward(self, tiny_config, tiny_dataset):
        model = build_model(tiny_config, tiny_dataset)
        bank = model.token_bank.embeddings
        _set_trainable(model, [bank])
        records = [r for r in tiny_dataset.train if r.pid in (0, 1)]
        labels = torch.tensor([r.pid for r in records])

        image_features = model.encode_image(tiny_dataset.load_images(records)).post_img_feature
        text_features = model.encode_prompts(labels)
        loss_stage1(image_features, text_features, labels, model.temperature).backward()
        return model, image_features

    def test_frozen_encoders_get_no_gradient(self, backward):
        """Test that every encoder parameter is left without gradient."""
        model, image_features = backward

        assert image_features.grad_fn is None
        for name, param in model.named_parameters():
            if name != "token_bank.embeddings":
                assert param.grad is None or not param.grad.any(), name

    def test_bank_gets_gradient_for_batch_identities(self, backward):
        """Test that the bank rows of identities in the batch receive a finite nonzero gradient."""
        model, _ = backward
        grad = model.token_bank.embeddings.grad

        assert torch.isfinite(grad).all()
        assert grad[0].any() and grad[1].any()
        assert not grad[2:].any()
