#pragma once

#include <Eigen/Dense>
#include <vector>

namespace marketlab {

enum class AgentKind { Fundamentalist, Chartist };

// Constants of one tradable asset, fixed over a run.
struct AssetParams {
  double dividend_growth = 0.001;   // expected per-step growth of the payout
  double shock_stdev = 0.01;        // stdev of the multiplicative growth shock
  double initial_price = 10.0;
  double initial_fundamental = 10.0;
  double initial_dividend = 0.002;
  double shares_outstanding = 40.0;
};

// Evolving market data for one asset.  price holds the latest cleared price,
// prev_price the one before it; dividend and fundamental are current-period.
struct AssetState {
  double price = 0.0;
  double prev_price = 0.0;
  double fundamental = 0.0;
  double dividend = 0.0;
};

// Trader parameters, drawn once per run.  reversion_speed is meaningful only
// for fundamentalists; correlation is the prior return correlation used to
// assemble each agent's covariance and is stored already repaired to be
// positive definite.
struct AgentProfile {
  AgentKind kind = AgentKind::Fundamentalist;
  double risk_aversion = 3.0;
  double ema_period = 20.0;   // memory of the agent's EMA recursions, >= 1
  double reversion_speed = 0.0;
  Eigen::MatrixXd correlation;
  double weight_min = -0.95;
  double weight_max = 0.95;
  double position_min = -5.0;
  double position_max = 10.0;
};

// Adaptive expectation state, one slot per asset.  variance is the EMA of
// squared forecast errors, trend the EMA of realized price returns (used by
// chartists), last_forecast the expected return recorded at the previous
// clearing so its error can be measured once the next price is known.
struct BeliefState {
  Eigen::VectorXd variance;
  Eigen::VectorXd trend;
  Eigen::VectorXd last_forecast;
};

// First two moments a trader assigns to next-period returns.
struct ExpectedMoments {
  Eigen::VectorXd expected_returns;
  Eigen::MatrixXd covariance;
};

// Holdings and wealth of one trader.  weights are realized portfolio weights
// (position value over wealth) after the last clearing.  Once bankrupt is
// set, wealth stays frozen and positions are zero.
struct AgentLedger {
  double wealth = 0.0;
  Eigen::VectorXd weights;
  Eigen::VectorXd positions;
  bool bankrupt = false;
};

// Parallel per-agent arrays; profiles[0..fundamentalists) are the
// fundamentalist traders, the rest are chartists.
struct Population {
  std::vector<AgentProfile> profiles;
  std::vector<BeliefState> beliefs;
  std::vector<AgentLedger> ledgers;
  int fundamentalists = 0;

  int size() const { return static_cast<int>(profiles.size()); }
};

// Everything the demand side needs to price one period: per-asset constants,
// the current states (price = previous cleared price during a clearing call),
// and the risk-free rate.  trend_uses_trial_price selects whether a chartist
// trend includes the price being formed or only realized prices.
struct MarketState {
  std::vector<AssetParams> params;
  std::vector<AssetState> states;
  double risk_free_rate = 0.0012;
  bool trend_uses_trial_price = false;
  // When off, an investor's portfolio weights are risk-scaled per asset (the
  // diagonal of the belief covariance).  The full inverse couples the assets:
  // at calibrated scales a fraction-of-a-percent gap between two assets'
  // mispricings is amplified past the weight bounds, so all investors slam
  // into one maximal long-short portfolio and every reshuffle of the
  // mispricing ordering throws block trades no counterparty can absorb.
  bool demand_uses_correlations = false;

  int assets() const { return static_cast<int>(params.size()); }
};

}  // namespace marketlab
