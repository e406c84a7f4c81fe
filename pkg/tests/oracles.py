"""Frozen reference values. Each one is computed by hand or from a closed form, never from the
package under test, and must not be edited to make a test pass."""
import math

# sum_k 1/(k!)^2 for k = 0..20: kernel of two unit-inner-product straight lines (linear lift)
LINE_KERNEL_INNER_1 = 2.279585302336067

# Ornstein-Uhlenbeck dX = -X dt + dW, X_0 = 1, at t = 1
OU_MEAN_T1 = 0.36787944117144233  # e^-1
OU_VAR_T1 = 0.43233235838169365  # (1 - e^-2) / 2
OU_SECOND_MOMENT_T1 = 0.5676676416183064  # e^-2 + (1 - e^-2) / 2

# chemo concentration with C_0 = 0, constant infusion 5 and k_C = 0.5, at t = 2
CHEMO_AT_2 = 6.321205588285577  # 10 (1 - e^-1)

# exponential-decay dexamethasone input, dose 10, one day after administration
COVID_INPUT_ONE_DAY = 3.6787944117144233  # 10 e^-1

# dexamethasone compartment at day 14 under constant unit input, X_4(0) = 0, k_kel = 1
DEX_AT_14 = 0.9999991684712809  # 1 - e^-14

# Spearman of [1,2,3,5,4] vs [1,2,3,4,5]: 1 - 6 * 2 / (5 * 24)
SPEARMAN_ONE_SWAP = 0.9

# neural SDE with two states, two controls, drift 3 x 64, diffusion 1 x 8:
# per state 4*64+64 + 2*(64*64+64) + 64+1 = 8705 drift and 2*8+8 + 8+1 = 33 diffusion
CANCER_NET_PARAMS = 17476

# daily grid of 61 points with 30% of the 60 interior points masked
MASKED_DAILY_POINTS = 61 - math.floor(0.3 * 60)

# linear-quadratic single shooting: dX = u dt on [0, 1], X_0 = 0, J = lam u^2 + (X_1 - a)^2
LQ_TARGET, LQ_LAM = 2.0, 0.5
LQ_OPTIMAL_DOSE = LQ_TARGET / (1.0 + LQ_LAM)
