#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "marketlab/clearing.hpp"
#include "marketlab/types.hpp"

namespace marketlab {

// Wealth below this is treated as bankruptcy; the trader drops out.
inline constexpr double kBankruptcyFloor = 1e-9;
// Committed belief variances never fall below this, so demand curves keep a
// resolvable slope even in noise-free configurations.
inline constexpr double kVarianceFloor = 1e-8;
// Running variance estimates are also floored at this multiple of the news
// variance (the squared shock volatility).  Without it a calm stretch walks
// the estimates far below the scale of arriving news, desired weights start
// responding to basis points, and the first ordinary surprise triggers a
// de-risking cascade no counterparty can absorb.  Four keeps the perceived
// risk at no less than twice the news volatility.
inline constexpr double kVarianceNewsRatio = 4.0;
// Multiplicative growth factors are floored here to keep dividends positive.
inline constexpr double kGrowthFactorFloor = 1e-6;
// Half-width, in log space, of the per-agent spread applied to the opening
// belief variance: agents start between exp(-s) and exp(+s) times the
// configured level.
inline constexpr double kPriorSpread = 0.7;

// Full parameter set of one simulation.  Defaults are the reference
// calibration: three assets, forty traders split evenly between
// fundamentalists and chartists, weekly-scale rates.
struct SimConfig {
  int assets = 3;
  int agents = 40;
  int fundamentalists = 20;
  int chartists = 20;
  long steps = 1000;
  std::uint64_t seed = 0;

  double risk_free_rate = 0.0012;
  double risk_aversion = 3.0;
  double initial_cash = 10.0;
  double initial_position = 1.0;
  double initial_price = 10.0;
  double initial_fundamental = 10.0;
  double initial_dividend = 0.002;
  double shares_outstanding = 40.0;  // per asset
  double dividend_growth = 0.001;
  double shock_stdev = 0.01;

  // Starting estimate for every belief variance.  Default is (2 * shock
  // stdev)^2, the level the forecast-error EMA sustains once returns settle
  // near their typical scale.  Starting at the sustained level matters: a
  // mismatched prior decays toward it and drags every desired weight through
  // a transient the clamps turn into spurious opening trades.
  double initial_variance = 2.5e-3;

  double tau_min = 20.0;  // EMA period draw range
  double tau_max = 80.0;
  double df_min = 0.5;    // fundamentalist reversion speed draw range
  double df_max = 1.0;
  double corr_min = -0.2; // prior correlation entry draw range
  double corr_max = 0.8;

  double weight_min = -0.95;
  double weight_max = 0.95;
  double position_min = -5.0;
  double position_max = 10.0;

  // When set, a chartist's trend sees the price being formed during the
  // auction.  That feedback makes chartist demand fall as the trial price
  // falls, so a sell imbalance can push the only crossing far from the
  // previous price.  Off by default: trends commit from realized prices,
  // and the auctioneer's curves stay single-crossing.
  bool trend_uses_trial_price = true;
  // When set, portfolio weights use each investor's full belief covariance.
  // Off by default: weights are risk-scaled per asset.  The full inverse
  // amplifies cross-asset gaps in expected returns far past the weight
  // bounds at this calibration, and the resulting maximal long-short
  // portfolios reshuffle en bloc whenever the mispricing ordering changes,
  // which no counterparty can absorb.
  bool demand_uses_correlations = false;
  ClearingConfig clearing;

  void validate() const;  // throws std::invalid_argument naming the field
};

// Optional pinning used by parameter sweeps: fix every chartist's EMA period
// and/or restrict the fundamentalist reversion speed draw range.
struct PopulationOverrides {
  std::optional<double> chartist_period;
  std::optional<std::pair<double, double>> reversion_range;
};

struct WealthUpdateResult {
  double wealth = 0.0;   // as computed, not floored
  bool bankrupt = false; // wealth <= kBankruptcyFloor
};

// Next-period wealth: unspent cash earns the risk-free rate, each risky slice
// earns its asset's price-plus-dividend return.  prev_weights are the
// realized weights at the previous clearing.
WealthUpdateResult wealth_update(double prev_wealth,
                                 Eigen::Ref<const Eigen::VectorXd> prev_weights,
                                 Eigen::Ref<const Eigen::VectorXd> prices,
                                 Eigen::Ref<const Eigen::VectorXd> prev_prices,
                                 Eigen::Ref<const Eigen::VectorXd> dividends,
                                 double risk_free_rate);

// One multiplicative growth step of the dividend; the factor 1 + g + sd*shock
// is floored at kGrowthFactorFloor (sets *floored when given).
double dividend_step(double dividend, double growth, double stdev,
                     double shock, bool* floored = nullptr);

// Same factor applied to the fundamental value; callers pass the same shock
// to both so the two series move together.
double fundamental_step(double fundamental, double growth, double stdev,
                        double shock, bool* floored = nullptr);

// (fundamentalist, chartist) shares of total wealth.
std::pair<double, double> wealth_shares(const Population& population);

// Time series produced by one run, row-major step*assets for per-asset data.
// Step t occupies rows [t-1]*assets .. [t-1]*assets + assets-1, t = 1..steps.
struct RunOutput {
  int assets = 0;
  long steps = 0;
  std::vector<double> prices;
  std::vector<double> fundamentals;
  std::vector<double> dividends;
  std::vector<double> simple_returns;  // price-only
  std::vector<double> log_returns;
  std::vector<double> fundamentalist_share;  // per step
  std::vector<double> chartist_share;
  std::vector<double> fundamentalist_wealth;
  std::vector<double> chartist_wealth;
  std::vector<int> clearing_sweeps;
  std::vector<double> clearing_residuals;
  long shock_floor_events = 0;
  long bankruptcies = 0;
  Population final_population;

  double at(const std::vector<double>& series, long step, int asset) const {
    return series[static_cast<std::size_t>(step - 1) * assets + asset];
  }
  std::vector<double> asset_series(const std::vector<double>& series,
                                   int asset) const;
  double total_wealth(long step) const {
    return fundamentalist_wealth[step - 1] + chartist_wealth[step - 1];
  }
};

class SimulationError : public std::runtime_error {
 public:
  SimulationError(const std::string& what, long step,
                  Eigen::VectorXd residuals);
  long step() const { return step_; }
  const Eigen::VectorXd& residuals() const { return residuals_; }

 private:
  long step_;
  Eigen::VectorXd residuals_;
};

// Draws the trader population for a run.  The draw stream is separate from
// the shock stream, so horizon changes never alter who trades.
Population build_population(const SimConfig& config, std::uint64_t seed,
                            const PopulationOverrides& overrides = {});

// Runs the full loop: shocks, belief updates, clearing, settlement.  Throws
// SimulationError if any step fails to clear.
RunOutput run_simulation(const SimConfig& config, std::uint64_t seed,
                         const PopulationOverrides& overrides = {});

}  // namespace marketlab
