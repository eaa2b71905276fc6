"""Central finite differences, used as the gradient oracle."""
import torch


def numeric_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(fn(x).detach())
        flat[i] = old - h
        down = float(fn(x).detach())
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = torch.linalg.norm((a - b).reshape(-1)).item()
    den = max(torch.linalg.norm(a.reshape(-1)).item(), torch.linalg.norm(b.reshape(-1)).item(), 1e-12)
    return num / den


def grads_agree(a: torch.Tensor, b: torch.Tensor, rel: float, floor: float = 1e-9) -> bool:
    """Relative agreement, with an absolute floor for gradients that are identically zero."""
    num = torch.linalg.norm((a - b).reshape(-1)).item()
    return num <= floor or rel_error(a, b) <= rel
