#include "marketlab/market_model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace marketlab {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

double fundamental_price_constant_growth(double growth, double dividend,
                                         double risk_free_rate) {
  require(growth >= 0.0,
          "fundamental price: growth must be non-negative, got " +
              std::to_string(growth));
  require(dividend > 0.0,
          "fundamental price: dividend must be positive, got " +
              std::to_string(dividend));
  // the discounted sum only converges for growth < r
  require(growth < risk_free_rate,
          "fundamental price: growth " + std::to_string(growth) +
              " must be below the risk-free rate " +
              std::to_string(risk_free_rate));
  return (1.0 + growth) * dividend / (risk_free_rate - growth);
}

double fundamentalist_expected_return(double price, double fundamental,
                                      double dividend, double growth,
                                      double reversion_speed) {
  require(price > 0.0, "fundamentalist return: price must be positive, got " +
                           std::to_string(price));
  require(fundamental > 0.0,
          "fundamentalist return: fundamental must be positive, got " +
              std::to_string(fundamental));
  require(dividend >= 0.0 && reversion_speed >= 0.0,
          "fundamentalist return: dividend and reversion speed must be "
          "non-negative");
  return (growth * fundamental + reversion_speed * (fundamental - price) +
          (1.0 + growth) * dividend) /
         price;
}

double ema_weight(double period) {
  require(period >= 1.0,
          "ema weight: period must be >= 1, got " + std::to_string(period));
  return 1.0 - std::exp(-1.0 / period);
}

double chartist_trend_update(double trend, double price, double prev_price,
                             double period) {
  require(prev_price > 0.0,
          "trend update: previous price must be positive, got " +
              std::to_string(prev_price));
  double w = ema_weight(period);
  return (1.0 - w) * trend + w * ((price - prev_price) / prev_price);
}

double chartist_expected_return(double trend, double dividend, double price,
                                double growth) {
  require(price > 0.0, "chartist return: price must be positive, got " +
                           std::to_string(price));
  require(dividend >= 0.0, "chartist return: dividend must be non-negative");
  return trend + (1.0 + growth) * dividend / price;
}

double ema_variance_update(double variance, double forecast_error,
                           double period) {
  require(variance >= 0.0, "variance update: variance must be non-negative");
  double w = ema_weight(period);
  return (1.0 - w) * variance + w * forecast_error * forecast_error;
}

Eigen::MatrixXd repair_correlation(const Eigen::MatrixXd& correlation) {
  require(correlation.rows() == correlation.cols() && correlation.rows() > 0,
          "correlation repair: matrix must be square and non-empty");
  const auto n = correlation.rows();
  require(correlation.isApprox(correlation.transpose(), 1e-12),
          "correlation repair: matrix must be symmetric");
  require((correlation.array().abs() <= 1.0 + 1e-12).all(),
          "correlation repair: entries must lie in [-1, 1]");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(correlation);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("correlation repair: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(kCorrelationEigenFloor);
  Eigen::MatrixXd repaired =
      es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  // clipping can move the diagonal off 1; scale it back
  Eigen::VectorXd d = repaired.diagonal().cwiseSqrt().cwiseInverse();
  repaired = d.asDiagonal() * repaired * d.asDiagonal();
  for (Eigen::Index i = 0; i < n; ++i) repaired(i, i) = 1.0;
  return repaired;
}

Eigen::MatrixXd assemble_covariance(const Eigen::VectorXd& stdevs,
                                    const Eigen::MatrixXd& repaired) {
  require(stdevs.size() == repaired.rows(),
          "covariance: stdev count must match correlation size");
  require((stdevs.array() >= 0.0).all(),
          "covariance: stdevs must be non-negative");
  Eigen::MatrixXd sigma =
      stdevs.asDiagonal() * repaired * stdevs.asDiagonal();
  sigma.diagonal().array() += kCovarianceRidge;
  return sigma;
}

Eigen::MatrixXd build_covariance(const Eigen::VectorXd& stdevs,
                                 const Eigen::MatrixXd& correlation) {
  return assemble_covariance(stdevs, repair_correlation(correlation));
}

Eigen::MatrixXd invert_spd(const Eigen::MatrixXd& m) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("spd inverse: factorization failed");
  const auto n = m.rows();
  Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd x = ldlt.solve(id);
  x += ldlt.solve(id - m * x);  // one refinement pass tightens the residual
  if (!x.allFinite())
    throw std::runtime_error("spd inverse: result is not finite");
  return x;
}

Eigen::VectorXd solve_spd(const Eigen::MatrixXd& m, const Eigen::VectorXd& b) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("spd solve: factorization failed");
  Eigen::VectorXd x = ldlt.solve(b);
  x += ldlt.solve(b - m * x);
  if (!x.allFinite()) throw std::runtime_error("spd solve: result not finite");
  return x;
}

Eigen::VectorXd clamp_weights(Eigen::VectorXd raw, double weight_min,
                              double weight_max) {
  require(weight_min < weight_max && weight_min <= 0.0 && weight_max >= 0.0,
          "weight clamp: bounds must straddle zero with min < max");
  // Two stages.  Each weight is first clamped to the per-asset bounds; then,
  // if the gross risky proportion sum |pi_i| still exceeds the larger bound,
  // the whole vector is scaled down proportionally so it lands on that bound.
  // The gross cap is what limits leverage: no book can carry more long-plus-
  // short exposure than the cap times wealth, so no single-asset move can
  // wipe an investor out in one settlement, and relative views across assets
  // are preserved by the rescale.  The + 0.0 turns -0.0 into +0.0.
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    raw[i] = std::min(std::max(raw[i], weight_min), weight_max) + 0.0;
  const double cap = std::max(weight_max, -weight_min);
  double gross = 0.0;
  for (Eigen::Index i = 0; i < raw.size(); ++i) gross += std::abs(raw[i]);
  if (gross > cap) {
    const double scale = cap / gross;
    for (Eigen::Index i = 0; i < raw.size(); ++i) raw[i] = raw[i] * scale + 0.0;
  }
  return raw;
}

Eigen::VectorXd optimal_weights(const Eigen::VectorXd& expected_returns,
                                const Eigen::MatrixXd& covariance,
                                double risk_free_rate, double risk_aversion,
                                double weight_min, double weight_max) {
  require(expected_returns.size() == covariance.rows() &&
              covariance.rows() == covariance.cols(),
          "optimal weights: dimension mismatch between returns and "
          "covariance");
  require(risk_aversion > 0.0,
          "optimal weights: risk aversion must be positive, got " +
              std::to_string(risk_aversion));
  require(expected_returns.allFinite(),
          "optimal weights: expected returns must be finite");
  Eigen::VectorXd excess =
      expected_returns.array() - risk_free_rate;
  Eigen::VectorXd raw = solve_spd(covariance, excess) / risk_aversion;
  return clamp_weights(std::move(raw), weight_min, weight_max);
}

Eigen::VectorXd desired_positions(double wealth,
                                  const Eigen::VectorXd& weights,
                                  const Eigen::VectorXd& prices,
                                  double position_min, double position_max,
                                  bool bankrupt) {
  require(weights.size() == prices.size(),
          "desired positions: weights and prices must have equal length");
  require((prices.array() > 0.0).all(),
          "desired positions: prices must be positive");
  require(position_min < position_max,
          "desired positions: position bounds must be ordered");
  Eigen::VectorXd z = Eigen::VectorXd::Zero(weights.size());
  if (bankrupt) return z;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    double want = wealth * weights[i] / prices[i];
    z[i] = std::min(std::max(want, position_min), position_max) + 0.0;
  }
  return z;
}

double agent_expected_return(const AgentProfile& profile, double trend_state,
                             double trial_price, double prev_price,
                             double fundamental, double dividend,
                             double dividend_growth,
                             bool trend_uses_trial_price) {
  if (profile.kind == AgentKind::Fundamentalist) {
    return fundamentalist_expected_return(trial_price, fundamental, dividend,
                                          dividend_growth,
                                          profile.reversion_speed);
  }
  double m = trend_uses_trial_price
                 ? chartist_trend_update(trend_state, trial_price, prev_price,
                                         profile.ema_period)
                 : trend_state;
  return chartist_expected_return(m, dividend, trial_price, dividend_growth);
}

}  // namespace marketlab
