"""Scalar gate fusing the caption-image and caption-OCR streams."""

from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .layers import masked_mean


class FusionGate(nn.Module):
    """lambda = sigmoid(FC2(tanh(FC1([mean(z_img); mean(z_ocr)])))) and C = lambda * z_img + z_ocr.

    Posts without OCR text get ``z_ocr = 0`` and a learned ``null_ocr`` vector
    stands in for its pooled mean.
    """

    def __init__(self, dim: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(2 * dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.null_ocr = nn.Parameter(torch.zeros(dim))

    def forward(self, z_img, z_ocr, mask, ocr_present: Optional[torch.Tensor] = None):
        if z_img.shape != z_ocr.shape:
            raise ValueError(f"stream shapes differ: {tuple(z_img.shape)} vs {tuple(z_ocr.shape)}")
        m_img = masked_mean(z_img, mask)
        m_ocr = masked_mean(z_ocr, mask)
        if ocr_present is not None:
            present = ocr_present.to(z_ocr.dtype)
            z_ocr = z_ocr * present[:, None, None]
            m_ocr = m_ocr * present[:, None] + self.null_ocr * (1 - present)[:, None]
        lam = torch.sigmoid(self.fc2(torch.tanh(self.fc1(torch.cat([m_img, m_ocr], dim=-1)))))
        fused = lam[:, :, None] * z_img + z_ocr
        return fused, lam.squeeze(-1)


def gate_forward(z_img, z_ocr, gate: FusionGate, mask=None, ocr_present=None):
    """Unbatched convenience wrapper: (r, d) inputs in, ``(C, lambda)`` out."""
    if mask is None:
        mask = torch.ones(z_img.shape[0], dtype=torch.bool)
    present = None if ocr_present is None else torch.tensor([bool(ocr_present)])
    fused, lam = gate(z_img[None], z_ocr[None], mask[None], present)
    return fused[0], lam[0]
