"""Standard and relativistic-average GAN losses on raw discriminator scores.

-log(sigmoid(x)) is written as softplus(-x) and -log(1 - sigmoid(x)) as
softplus(x), which stays finite for large |x|.
"""
import torch
import torch.nn.functional as F


def _scores(d_real, d_fake):
    d_real, d_fake = torch.as_tensor(d_real), torch.as_tensor(d_fake)
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("loss needs non-empty real and fake score batches")
    return d_real.flatten(), d_fake.flatten()


def standard_gan_losses(d_real, d_fake):
    d_real, d_fake = _scores(d_real, d_fake)
    loss_d = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    loss_g = F.softplus(-d_fake).mean()
    return loss_d, loss_g


def relativistic_scores(d_real, d_fake):
    d_real, d_fake = _scores(d_real, d_fake)
    return d_real - d_fake.mean(), d_fake - d_real.mean()


def relativistic_losses(d_real, d_fake):
    rel_real, rel_fake = relativistic_scores(d_real, d_fake)
    loss_d = F.softplus(-rel_real).mean() + F.softplus(rel_fake).mean()
    loss_g = F.softplus(-rel_fake).mean() + F.softplus(rel_real).mean()
    return loss_d, loss_g


LOSS_FUNCTIONS = {"standard": standard_gan_losses, "relativistic": relativistic_losses}
