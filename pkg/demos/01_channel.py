"""Channel walk-through: draw a 4x2 Rayleigh block, estimate it from pilots,
estimate the SNR, and detect QPSK streams with L-MMSE at a few SNRs."""

import torch

from adaptive_semcom import channel as ch

M, K, L = 4, 2, 512
g = torch.Generator().manual_seed(0)
P = ch.make_pilots(K, ch.pilot_length(L, K), torch.complex128)

print(f"{'snr_db':>6} {'snr_hat':>8} {'ls_err':>8} {'mse_ls':>8} {'mse_perfect':>11}")
for snr_db in (0.0, 10.0, 20.0):
    H = ch.sample_channel(M, K, g, (), torch.complex128)
    nv = ch.noise_var_for_snr(H, snr_db)
    H_hat = ch.ls_estimate(ch.send_pilots(H, P, nv, g), P)
    snr_hat = ch.estimate_snr(H_hat, P, nv)

    bits = torch.randint(0, 2, (L, K, 2), generator=g)
    Z = ((1 - 2 * bits[..., 0]) + 1j * (1 - 2 * bits[..., 1])).to(torch.complex128) / 2 ** 0.5
    Y = ch.transmit(Z, H, nv, g)
    mse_ls = (ch.lmmse_detect(Y, H_hat, nv) - Z.T).abs().pow(2).mean()
    mse_perfect = (ch.lmmse_detect(Y, H, nv) - Z.T).abs().pow(2).mean()
    err = torch.linalg.norm(H_hat - H) / torch.linalg.norm(H)
    snr_hat_db = 10 * torch.log10(snr_hat)
    print(f"{snr_db:6.1f} {float(snr_hat_db):8.2f} {float(err):8.4f} {float(mse_ls):8.4f} {float(mse_perfect):11.4f}")
