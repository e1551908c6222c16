#pragma once

#include <Eigen/Dense>

#include "marketlab/types.hpp"

// Pure valuation and demand functions shared by the clearing engine and the
// simulator.  Everything here is deterministic and side-effect free.

namespace marketlab {

// Eigenvalue floor applied when repairing a correlation matrix.  Kept well
// away from zero on purpose: a nearly singular prior makes the implied
// portfolio explode along the degenerate direction and flip sign on
// microscopic price moves, which turns aggregate demand into a step function
// no price can clear.  0.05 bounds that amplification at 20x while leaving
// draws that were already positive definite essentially untouched.
inline constexpr double kCorrelationEigenFloor = 0.05;
// Ridge added to every assembled covariance so it is invertible even when
// some stdev is zero.
inline constexpr double kCovarianceRidge = 1e-12;

// Price of a payout stream growing at a constant rate, discounted at the
// risk-free rate: (1 + g) D / (r - g).  Requires 0 <= g < r.
double fundamental_price_constant_growth(double growth, double dividend,
                                         double risk_free_rate);

// Expected return of a mean-reverting trader: growth of the fundamental plus
// reversion of the price gap plus the dividend yield, all relative to the
// current price.
double fundamentalist_expected_return(double price, double fundamental,
                                      double dividend, double growth,
                                      double reversion_speed);

// Weight of the newest observation in an EMA with the given memory period.
double ema_weight(double period);

// EMA of realized price returns.  period >= 1; prev_price > 0.  obs_noise is
// an offset added to the return as observed, so two trend followers reading
// the same tape can disagree slightly; 0 reproduces the plain recursion.
double chartist_trend_update(double trend, double price, double prev_price,
                             double period, double obs_noise = 0.0);

// Trend extrapolation plus expected dividend yield.
double chartist_expected_return(double trend, double dividend, double price,
                                double growth);

// EMA of squared forecast errors.  variance >= 0, period >= 1.
double ema_variance_update(double variance, double forecast_error,
                           double period);

// Clips the eigenvalues of a symmetric correlation matrix at
// kCorrelationEigenFloor and rescales back to a unit diagonal.  Entries must
// lie in [-1, 1].  Idempotent on an already valid matrix.
Eigen::MatrixXd repair_correlation(const Eigen::MatrixXd& correlation);

// Covariance from per-asset stdevs and a correlation matrix; the correlation
// is repaired first and a small ridge keeps the result positive definite.
Eigen::MatrixXd build_covariance(const Eigen::VectorXd& stdevs,
                                 const Eigen::MatrixXd& correlation);

// Same assembly for a correlation that is already repaired; skips the
// eigendecomposition.  Used in per-step loops.
Eigen::MatrixXd assemble_covariance(const Eigen::VectorXd& stdevs,
                                    const Eigen::MatrixXd& repaired);

// Inverse of a symmetric positive definite matrix via LDLT with one step of
// iterative refinement.  Throws if the factorization degenerates.
Eigen::MatrixXd invert_spd(const Eigen::MatrixXd& m);

// Solve m * x = b with the same refinement.
Eigen::VectorXd solve_spd(const Eigen::MatrixXd& m, const Eigen::VectorXd& b);

// Clamps each component to [weight_min, weight_max].  The bounds are per
// asset; the sum may leave [weight_min, weight_max], in which case the cash
// weight 1 - sum is negative and the investor is levered at the riskless
// rate.  See the implementation note for why the aggregate is left free.
Eigen::VectorXd clamp_weights(Eigen::VectorXd raw, double weight_min,
                              double weight_max);

// Mean-variance weights of a power-utility investor: (1/lambda) Sigma^-1
// (E - r), then clamp_weights.  The unclamped solution is independent of
// wealth.
Eigen::VectorXd optimal_weights(const Eigen::VectorXd& expected_returns,
                                const Eigen::MatrixXd& covariance,
                                double risk_free_rate, double risk_aversion,
                                double weight_min, double weight_max);

// Share demand implied by weights at the given prices, clamped per asset to
// [position_min, position_max].  A bankrupt trader demands nothing.
Eigen::VectorXd desired_positions(double wealth,
                                  const Eigen::VectorXd& weights,
                                  const Eigen::VectorXd& prices,
                                  double position_min, double position_max,
                                  bool bankrupt = false);

// Expected return of one trader for one asset at a trial price.  For a
// chartist the trial return (plus the agent's observation offset) enters the
// trend only when trend_uses_trial_price is set; otherwise the committed
// trend is used as-is.  fundamental is the value as this trader perceives
// it, so callers apply any private valuation factor before the call.
double agent_expected_return(const AgentProfile& profile, double trend_state,
                             double trial_price, double prev_price,
                             double fundamental, double dividend,
                             double dividend_growth,
                             bool trend_uses_trial_price,
                             double trend_obs_noise = 0.0);

}  // namespace marketlab
