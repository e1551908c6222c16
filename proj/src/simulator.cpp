#include "marketlab/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "marketlab/market_model.hpp"
#include "marketlab/rng.hpp"

namespace marketlab {

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Shared multiplicative factor for dividend and fundamental growth.
double growth_factor(double growth, double stdev, double shock,
                     bool* floored) {
  double factor = 1.0 + growth + stdev * shock;
  const bool hit = factor < kGrowthFactorFloor;
  if (hit) factor = kGrowthFactorFloor;
  if (floored != nullptr) *floored = hit;
  return factor;
}

}  // namespace

void SimConfig::validate() const {
  require(assets >= 1, "assets must be >= 1");
  require(agents >= 1, "agents must be >= 1");
  require(fundamentalists >= 0, "fundamentalists must be >= 0");
  require(chartists >= 0, "chartists must be >= 0");
  require(fundamentalists + chartists == agents,
          "fundamentalists + chartists must equal agents");
  require(steps >= 1, "steps must be >= 1");
  require(risk_free_rate >= 0.0, "risk_free_rate must be >= 0");
  require(risk_aversion > 0.0, "risk_aversion must be positive");
  require(initial_cash >= 0.0, "initial_cash must be >= 0");
  require(initial_price > 0.0, "initial_price must be positive");
  require(initial_fundamental > 0.0, "initial_fundamental must be positive");
  require(initial_dividend >= 0.0, "initial_dividend must be >= 0");
  require(shares_outstanding > 0.0, "shares_outstanding must be positive");
  require(dividend_growth >= 0.0, "dividend_growth must be >= 0");
  require(shock_stdev >= 0.0, "shock_stdev must be >= 0");
  require(initial_variance >= 0.0, "initial_variance must be >= 0");
  require(tau_min >= 1.0, "tau_min must be >= 1");
  require(tau_max >= tau_min, "tau_max must be >= tau_min");
  require(df_min >= 0.0, "df_min must be >= 0");
  require(df_max >= df_min, "df_max must be >= df_min");
  require(corr_min >= -1.0, "corr_min must be >= -1");
  require(corr_max <= 1.0, "corr_max must be <= 1");
  require(corr_max >= corr_min, "corr_max must be >= corr_min");
  require(weight_min <= 0.0 && weight_max > 0.0 && weight_min < weight_max,
          "weight bounds must satisfy weight_min <= 0 < weight_max");
  require(position_min <= 0.0 && position_max > 0.0 &&
              position_min < position_max,
          "position bounds must satisfy position_min <= 0 < position_max");
  require(initial_position >= position_min &&
              initial_position <= position_max,
          "initial_position must lie within the position bounds");
  require(clearing.residual_tolerance > 0.0,
          "clearing.residual_tolerance must be positive");
  require(clearing.max_outer_sweeps >= 1,
          "clearing.max_outer_sweeps must be >= 1");
  require(clearing.max_bisection_steps >= 1,
          "clearing.max_bisection_steps must be >= 1");
  require(clearing.price_bracket_factor > 1.0,
          "clearing.price_bracket_factor must exceed 1");
  require(clearing.max_bracket_expansions >= 0,
          "clearing.max_bracket_expansions must be >= 0");
  require(clearing.damping > 0.0 && clearing.damping <= 1.0,
          "clearing.damping must lie in (0, 1]");
  const double wealth0 =
      initial_cash + assets * initial_position * initial_price;
  require(wealth0 > kBankruptcyFloor, "initial wealth must be positive");
}

WealthUpdateResult wealth_update(double prev_wealth,
                                 Eigen::Ref<const Eigen::VectorXd> prev_weights,
                                 Eigen::Ref<const Eigen::VectorXd> prices,
                                 Eigen::Ref<const Eigen::VectorXd> prev_prices,
                                 Eigen::Ref<const Eigen::VectorXd> dividends,
                                 double risk_free_rate) {
  const Eigen::Index n = prev_weights.size();
  require(prices.size() == n && prev_prices.size() == n &&
              dividends.size() == n,
          "wealth_update: vector sizes must match");
  double cash_share = 1.0;
  double risky = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    require(prev_prices[i] > 0.0,
            "wealth_update: previous prices must be positive");
    cash_share -= prev_weights[i];
    risky += prev_weights[i] * (prices[i] + dividends[i]) / prev_prices[i];
  }
  const double wealth =
      cash_share * prev_wealth * (1.0 + risk_free_rate) + prev_wealth * risky;
  return {wealth, wealth <= kBankruptcyFloor};
}

double dividend_step(double dividend, double growth, double stdev,
                     double shock, bool* floored) {
  require(dividend >= 0.0, "dividend_step: dividend must be >= 0");
  require(stdev >= 0.0, "dividend_step: stdev must be >= 0");
  return dividend * growth_factor(growth, stdev, shock, floored);
}

double fundamental_step(double fundamental, double growth, double stdev,
                        double shock, bool* floored) {
  require(fundamental > 0.0, "fundamental_step: fundamental must be positive");
  require(stdev >= 0.0, "fundamental_step: stdev must be >= 0");
  return fundamental * growth_factor(growth, stdev, shock, floored);
}

std::pair<double, double> wealth_shares(const Population& population) {
  double fund = 0.0;
  double chart = 0.0;
  for (int j = 0; j < population.size(); ++j) {
    const double w = population.ledgers[j].wealth;
    if (population.profiles[j].kind == AgentKind::Fundamentalist) {
      fund += w;
    } else {
      chart += w;
    }
  }
  const double total = fund + chart;
  require(total > 0.0, "wealth_shares: total wealth must be positive");
  return {fund / total, chart / total};
}

std::vector<double> RunOutput::asset_series(const std::vector<double>& series,
                                            int asset) const {
  std::vector<double> column;
  column.reserve(static_cast<std::size_t>(steps));
  for (long t = 1; t <= steps; ++t) column.push_back(at(series, t, asset));
  return column;
}

SimulationError::SimulationError(const std::string& what, long step,
                                 Eigen::VectorXd residuals)
    : std::runtime_error(what), step_(step), residuals_(std::move(residuals)) {}

Population build_population(const SimConfig& config, std::uint64_t seed,
                            const PopulationOverrides& overrides) {
  config.validate();
  if (overrides.chartist_period) {
    require(*overrides.chartist_period >= 1.0,
            "chartist_period override must be >= 1");
  }
  if (overrides.reversion_range) {
    require(overrides.reversion_range->first >= 0.0 &&
                overrides.reversion_range->second >=
                    overrides.reversion_range->first,
            "reversion_range override must be ordered and non-negative");
  }

  std::mt19937_64 engine(rng::derive_seed(seed, rng::kAgentDrawStream));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int n = config.assets;

  const double df_lo = overrides.reversion_range
                           ? overrides.reversion_range->first
                           : config.df_min;
  const double df_hi = overrides.reversion_range
                           ? overrides.reversion_range->second
                           : config.df_max;

  Population population;
  population.fundamentalists = config.fundamentalists;
  population.profiles.reserve(config.agents);
  population.beliefs.reserve(config.agents);
  population.ledgers.reserve(config.agents);

  const double wealth0 =
      config.initial_cash + n * config.initial_position * config.initial_price;

  // Belief priors are spread across agents.  With a single shared variance
  // the whole population re-evaluates its holdings at the same price, and
  // aggregate demand turns into a near-vertical wall the auctioneer cannot
  // split: every trader crosses from fully long to fully short within a few
  // basis points.  A modest per-agent spread staggers those crossings the
  // same way heterogeneous memories do a few steps later.  The draws come
  // from their own stream, so the trader identities above stay untouched.
  std::mt19937_64 prior_engine(rng::derive_seed(seed, rng::kBeliefStream));
  std::uniform_real_distribution<double> prior_u(-kPriorSpread, kPriorSpread);

  const double weight0 =
      config.initial_position * config.initial_price / wealth0;
  const double rho_mid = 0.5 * (config.corr_min + config.corr_max);
  const double yield0 = (1.0 + config.dividend_growth) *
                        config.initial_dividend / config.initial_price;

  for (int j = 0; j < config.agents; ++j) {
    const bool fundamentalist = j < config.fundamentalists;

    AgentProfile profile;
    profile.kind =
        fundamentalist ? AgentKind::Fundamentalist : AgentKind::Chartist;
    profile.risk_aversion = config.risk_aversion;
    if (!fundamentalist && overrides.chartist_period) {
      // Pinned period: the draw is skipped, not discarded, so sweep cells
      // with the same seed share every other draw.
      profile.ema_period = *overrides.chartist_period;
    } else {
      profile.ema_period =
          config.tau_min + (config.tau_max - config.tau_min) * u01(engine);
    }
    if (fundamentalist) {
      profile.reversion_speed = df_lo + (df_hi - df_lo) * u01(engine);
    }

    Eigen::MatrixXd correlation = Eigen::MatrixXd::Identity(n, n);
    for (int a = 0; a < n; ++a) {
      for (int b = a + 1; b < n; ++b) {
        const double rho =
            config.corr_min + (config.corr_max - config.corr_min) * u01(engine);
        correlation(a, b) = rho;
        correlation(b, a) = rho;
      }
    }
    profile.correlation = repair_correlation(correlation);
    profile.weight_min = config.weight_min;
    profile.weight_max = config.weight_max;
    profile.position_min = config.position_min;
    profile.position_max = config.position_max;

    // Opening estimates.  The variance is the configured level times a
    // per-agent factor; the trend is then set so this agent wants exactly
    // the endowed weight w0 at the starting prices: for equicorrelated
    // Sigma the required excess return is w0 * lambda * var0 * (1+(n-1)rho).
    // Starting anywhere else makes the first clearing reprice the setup
    // instead of information.
    const double variance0 = std::max(
        config.initial_variance * std::exp(prior_u(prior_engine)),
        kVarianceFloor);
    const double diversification =
        config.demand_uses_correlations ? 1.0 + (n - 1) * rho_mid : 1.0;
    const double excess0 =
        weight0 * config.risk_aversion * variance0 * diversification;
    const double trend0 = config.risk_free_rate + excess0 - yield0;

    BeliefState belief;
    belief.variance = Eigen::VectorXd::Constant(n, variance0);
    belief.trend = Eigen::VectorXd::Constant(n, trend0);
    belief.last_forecast = Eigen::VectorXd::Constant(n, config.risk_free_rate);

    AgentLedger ledger;
    ledger.wealth = wealth0;
    ledger.positions = Eigen::VectorXd::Constant(n, config.initial_position);
    ledger.weights = Eigen::VectorXd::Constant(
        n, config.initial_position * config.initial_price / wealth0);
    ledger.bankrupt = false;

    population.profiles.push_back(std::move(profile));
    population.beliefs.push_back(std::move(belief));
    population.ledgers.push_back(std::move(ledger));
  }
  return population;
}

RunOutput run_simulation(const SimConfig& config, std::uint64_t seed,
                         const PopulationOverrides& overrides) {
  config.validate();
  Population population = build_population(config, seed, overrides);

  const int n = config.assets;
  MarketState market;
  market.risk_free_rate = config.risk_free_rate;
  market.trend_uses_trial_price = config.trend_uses_trial_price;
  market.demand_uses_correlations = config.demand_uses_correlations;
  market.params.resize(n);
  market.states.resize(n);
  for (int i = 0; i < n; ++i) {
    AssetParams& p = market.params[i];
    p.dividend_growth = config.dividend_growth;
    p.shock_stdev = config.shock_stdev;
    p.initial_price = config.initial_price;
    p.initial_fundamental = config.initial_fundamental;
    p.initial_dividend = config.initial_dividend;
    p.shares_outstanding = config.shares_outstanding;
    AssetState& s = market.states[i];
    s.price = config.initial_price;
    s.prev_price = config.initial_price;
    s.fundamental = config.initial_fundamental;
    s.dividend = config.initial_dividend;
  }

  std::mt19937_64 shock_engine(rng::derive_seed(seed, rng::kShockStream));
  std::normal_distribution<double> gauss(0.0, 1.0);

  RunOutput out;
  out.assets = n;
  out.steps = config.steps;
  const std::size_t cells = static_cast<std::size_t>(config.steps) * n;
  out.prices.reserve(cells);
  out.fundamentals.reserve(cells);
  out.dividends.reserve(cells);
  out.simple_returns.reserve(cells);
  out.log_returns.reserve(cells);
  out.fundamentalist_share.reserve(config.steps);
  out.chartist_share.reserve(config.steps);
  out.fundamentalist_wealth.reserve(config.steps);
  out.chartist_wealth.reserve(config.steps);
  out.clearing_sweeps.reserve(config.steps);
  out.clearing_residuals.reserve(config.steps);

  for (long t = 1; t <= config.steps; ++t) {
    // One standard normal per asset drives both the dividend and the
    // fundamental, so payout news and value estimates move together.
    for (int i = 0; i < n; ++i) {
      AssetState& s = market.states[i];
      const AssetParams& p = market.params[i];
      const double shock = gauss(shock_engine);
      bool floored = false;
      s.dividend = dividend_step(s.dividend, p.dividend_growth, p.shock_stdev,
                                 shock, &floored);
      s.fundamental = fundamental_step(s.fundamental, p.dividend_growth,
                                       p.shock_stdev, shock, nullptr);
      if (floored) ++out.shock_floor_events;
    }

    ClearingResult cleared;
    try {
      cleared = clear_market(population, market, config.clearing);
    } catch (const ClearingError& err) {
      throw SimulationError("step " + std::to_string(t) + ": " + err.what(), t,
                            err.residuals());
    }

    // Settlement.  The forecast error is measured against the forecast
    // recorded at the previous clearing before that slot is overwritten;
    // the new forecast is recorded with the pre-commit trend, exactly the
    // value the clearing evaluated at the cleared price.
    for (int j = 0; j < population.size(); ++j) {
      AgentLedger& ledger = population.ledgers[j];
      if (ledger.bankrupt) continue;
      const AgentProfile& profile = population.profiles[j];
      BeliefState& belief = population.beliefs[j];

      for (int i = 0; i < n; ++i) {
        const AssetState& s = market.states[i];
        const double realized =
            (cleared.prices[i] + s.dividend - s.price) / s.price;
        const double err = belief.last_forecast[i] - realized;
        const double floor_i = std::max(
            kVarianceFloor, kVarianceNewsRatio * market.params[i].shock_stdev *
                                market.params[i].shock_stdev);
        belief.variance[i] = std::max(
            ema_variance_update(belief.variance[i], err, profile.ema_period),
            floor_i);
      }
      for (int i = 0; i < n; ++i) {
        const AssetState& s = market.states[i];
        belief.last_forecast[i] = agent_expected_return(
            profile, belief.trend[i], cleared.prices[i], s.price,
            s.fundamental, s.dividend, market.params[i].dividend_growth,
            market.trend_uses_trial_price);
      }
      if (profile.kind == AgentKind::Chartist) {
        for (int i = 0; i < n; ++i) {
          const AssetState& s = market.states[i];
          belief.trend[i] = chartist_trend_update(
              belief.trend[i], cleared.prices[i], s.price, profile.ema_period);
        }
      }

      if (cleared.wealth[j] <= kBankruptcyFloor) {
        ledger.bankrupt = true;
        ledger.wealth = kBankruptcyFloor;
        ledger.positions.setZero();
        ledger.weights.setZero();
        ++out.bankruptcies;
      } else {
        ledger.wealth = cleared.wealth[j];
        ledger.positions = cleared.positions[j];
        ledger.weights = cleared.weights[j];
      }
    }

    double fund_wealth = 0.0;
    double chart_wealth = 0.0;
    for (int j = 0; j < population.size(); ++j) {
      if (population.profiles[j].kind == AgentKind::Fundamentalist) {
        fund_wealth += population.ledgers[j].wealth;
      } else {
        chart_wealth += population.ledgers[j].wealth;
      }
    }
    const double total_wealth = fund_wealth + chart_wealth;

    for (int i = 0; i < n; ++i) {
      AssetState& s = market.states[i];
      out.prices.push_back(cleared.prices[i]);
      out.fundamentals.push_back(s.fundamental);
      out.dividends.push_back(s.dividend);
      out.simple_returns.push_back(cleared.prices[i] / s.price - 1.0);
      out.log_returns.push_back(std::log(cleared.prices[i] / s.price));
      s.prev_price = s.price;
      s.price = cleared.prices[i];
    }
    out.fundamentalist_share.push_back(fund_wealth / total_wealth);
    out.chartist_share.push_back(chart_wealth / total_wealth);
    out.fundamentalist_wealth.push_back(fund_wealth);
    out.chartist_wealth.push_back(chart_wealth);
    out.clearing_sweeps.push_back(cleared.sweeps);
    out.clearing_residuals.push_back(cleared.residual);
  }

  out.final_population = std::move(population);
  return out;
}

}  // namespace marketlab
