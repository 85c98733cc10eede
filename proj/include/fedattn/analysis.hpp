#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fedattn/model.hpp"
#include "fedattn/oracle.hpp"
#include "fedattn/protocol.hpp"
#include "fedattn/schedule.hpp"

namespace fedattn {

// Realized per-block ratios and deviations measured along one run. The true
// Lipschitz constants are uncomputable suprema; every checker here uses the
// realized quantities, for which the recursion inequalities hold
// step-by-step by construction.
struct GainTable {
    int M = 0;
    int N = 0;
    std::vector<double> rho;                 // attention-path ratio per block
    std::vector<double> theta;               // FFN-path ratio per block
    std::vector<std::vector<double>> sigma;  // [m-1][n] realized local-vs-global gaps
    std::vector<double> sync_extra;          // sync blocks: ||O - centralized-op(X)||
    std::vector<std::uint8_t> is_sync;

    double sigma_sum(int m) const;  // m is 1-based
    double gamma(int m) const { return (1.0 + theta[m - 1]) * (1.0 + rho[m - 1]); }
    // Injection at block m: (1+theta) * (sigma sum at local blocks, or the
    // measured sync-block residual, which is ~0 for dense exchange).
    double injection(int m) const;

    // columns: m,sigma_sum,theta,rho,gamma_m,Gamma_m,cumulative_bound
    std::string to_csv() const;
};

// Attention-path and FFN-path ratios for one block at a pair of inputs, both
// evaluated through the centralized (full-sequence, causal) operator.
// Identical inputs give (0, 0) by convention.
std::pair<double, double> realized_gains(const ModelWeights& weights, int block,
                                         const Mat& x_fed, const Mat& x_cen);

GainTable build_gain_table(const ModelWeights& weights, const RunTrace& trace,
                           const CenTrace& cen);

struct StepVerdict {
    int t = 0, h = 0, m = 0;
    bool sync = false;
    double lhs = 0.0, rhs = 0.0, slack = 0.0;
};

// Verifies the per-block deviation recursion along the two trajectories:
//   ||X^{m} - cen^{m}|| <= gamma_m ||X^{m-1} - cen^{m-1}|| + injection_m
// with realized gains. Slack should never fall below roundoff.
std::vector<StepVerdict> check_recursion(const RunTrace& trace, const CenTrace& cen,
                                         const GainTable& gains);

// The recursion chained from the shared initialization; an upper bound on
// the measured final deviation.
double chained_bound(const GainTable& gains);

// Uniform-schedule bound: the literal triple sum over rounds, local forwards
// and amplification products (blocks indexed m = Ht + h).
double theorem1_bound(const GainTable& gains, int H, int T);

// Closed form under uniform constants:
//   (1+theta) sigma_sum * (gamma^M-1)/(gamma-1) * (1 - (gamma-1)/(gamma^H-1))
// with the gamma -> 1 limits M and 1 - 1/H.
double corollary1_bound(double theta, double rho, double sigma_sum, int H, int M);
double corollary1_term_d(double gamma, int M);
double corollary1_term_e(double gamma, int H);

// Arbitrary-schedule bound: the fully-local error sum minus the reduction
// earned at each sync block. Specializes to theorem1_bound for uniform
// schedules.
double theorem3_bound(const GainTable& gains, const SyncSchedule& sched);

// Error reduction attributable to a global attention at block m:
//   Gamma_m = (1+theta_m) sigma_sum_m * prod_{i>m} gamma_i
double gamma_reduction(const GainTable& gains, int m);

// For the step H -> H+1: (communication reduction, error level reached),
// i.e. (1/(H(H+1)), H/(H+1)).
std::pair<double, double> marginal_comm(int H);

struct UniformMaxima {
    double theta = 0.0;
    double rho = 0.0;
    double sigma_sum = 0.0;  // sum over participants of their per-block maxima
};
UniformMaxima uniform_maxima(const GainTable& gains);

}  // namespace fedattn
