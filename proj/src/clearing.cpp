#include "marketlab/clearing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <utility>

#include "marketlab/market_model.hpp"
#include "marketlab/simulator.hpp"

namespace marketlab {

ClearingError::ClearingError(const std::string& what,
                             Eigen::VectorXd residuals)
    : std::runtime_error(what), residuals_(std::move(residuals)) {}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline double clampd(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

// Per-clearing precomputation.  Beliefs, ledgers and covariances are frozen
// while one period clears, so each agent's factorized covariance and the
// linear dependence of trial wealth on trial prices are constants.
struct DemandContext {
  int n = 0;
  int N = 0;
  double r = 0.0;
  bool trial_trend = true;

  // per asset
  std::vector<double> prev_price, fundamental, dividend, growth, supply;

  // per agent
  std::vector<Eigen::MatrixXd> sigma;          // covariance
  std::vector<Eigen::LDLT<Eigen::MatrixXd>> ldlt;
  std::vector<Eigen::MatrixXd> scaled_inv;     // Sigma^-1 / lambda
  std::vector<double> sizing_wealth;           // pre-trade wealth, fixed for
                                               // the whole price search
  std::vector<double> trend;                   // [j*n + i]
  std::vector<double> reversion, lambda_inv, ema_w;
  std::vector<double> wmin, wmax, zmin, zmax;
  std::vector<char> chartist, active;

  const Population* pop = nullptr;
  const MarketState* market = nullptr;

  // scratch
  mutable std::vector<double> e_buf, pi_buf, solve_buf;
  mutable Eigen::VectorXd vec_a, vec_b, vec_c;
};

DemandContext make_context(const Population& pop, const MarketState& market) {
  DemandContext c;
  c.n = market.assets();
  c.N = pop.size();
  c.r = market.risk_free_rate;
  c.trial_trend = market.trend_uses_trial_price;
  c.pop = &pop;
  c.market = &market;

  c.prev_price.resize(c.n);
  c.fundamental.resize(c.n);
  c.dividend.resize(c.n);
  c.growth.resize(c.n);
  c.supply.resize(c.n);
  for (int i = 0; i < c.n; ++i) {
    c.prev_price[i] = market.states[i].price;
    c.fundamental[i] = market.states[i].fundamental;
    c.dividend[i] = market.states[i].dividend;
    c.growth[i] = market.params[i].dividend_growth;
    c.supply[i] = market.params[i].shares_outstanding;
  }

  c.sigma.resize(c.N);
  c.ldlt.resize(c.N);
  c.scaled_inv.resize(c.N);
  c.sizing_wealth.resize(c.N);
  c.trend.resize(static_cast<std::size_t>(c.N) * c.n);
  c.reversion.resize(c.N);
  c.lambda_inv.resize(c.N);
  c.ema_w.resize(c.N);
  c.wmin.resize(c.N);
  c.wmax.resize(c.N);
  c.zmin.resize(c.N);
  c.zmax.resize(c.N);
  c.chartist.resize(c.N);
  c.active.resize(c.N);

  for (int j = 0; j < c.N; ++j) {
    const AgentProfile& prof = pop.profiles[j];
    const BeliefState& belief = pop.beliefs[j];
    const AgentLedger& ledger = pop.ledgers[j];
    c.active[j] = ledger.bankrupt ? 0 : 1;
    c.chartist[j] = prof.kind == AgentKind::Chartist ? 1 : 0;
    c.reversion[j] = prof.reversion_speed;
    c.lambda_inv[j] = 1.0 / prof.risk_aversion;
    c.ema_w[j] = ema_weight(prof.ema_period);
    c.wmin[j] = prof.weight_min;
    c.wmax[j] = prof.weight_max;
    c.zmin[j] = prof.position_min;
    c.zmax[j] = prof.position_max;
    for (int i = 0; i < c.n; ++i) c.trend[j * c.n + i] = belief.trend[i];

    if (!c.active[j]) continue;
    if (market.demand_uses_correlations)
      c.sigma[j] =
          assemble_covariance(belief.variance.cwiseSqrt(), prof.correlation);
    else
      c.sigma[j] = belief.variance.asDiagonal();
    c.ldlt[j].compute(c.sigma[j]);
    if (c.ldlt[j].info() != Eigen::Success)
      throw std::runtime_error("clearing: covariance factorization failed");
    c.scaled_inv[j] = invert_spd(c.sigma[j]) / prof.risk_aversion;

    // Demand is sized off the wealth the investor walks in with: last
    // period's holdings at last period's prices, plus the dividend and
    // interest just collected.  The trial price enters demand only through
    // the expected return and the per-share conversion.  Marking the sizing
    // wealth to the trial price instead couples every holder's buying power
    // to the price being searched for, and in a one-sided market that
    // feedback disconnects the root from the previous price: a wave of
    // selling then marks the absorbers down and the sellers up until the
    // only clearing price is orders of magnitude away.  Settlement is not
    // affected; it reprices positions at the cleared prices afterwards.
    double s = 0.0;
    double base = 0.0;
    for (int i = 0; i < c.n; ++i) {
      double w = ledger.weights[i];
      s += w;
      base += ledger.wealth * w * (c.prev_price[i] + c.dividend[i]) /
              c.prev_price[i];
    }
    c.sizing_wealth[j] = (1.0 - s) * ledger.wealth * (1.0 + c.r) + base;
  }

  c.e_buf.resize(c.n);
  c.pi_buf.resize(c.n);
  c.solve_buf.resize(c.n);
  c.vec_a.resize(c.n);
  c.vec_b.resize(c.n);
  c.vec_c.resize(c.n);
  return c;
}

// Expected return of agent j for asset i at trial price p; mirrors
// agent_expected_return arithmetic exactly.
inline double ctx_expected_return(const DemandContext& c, int j, int i,
                                  double p) {
  if (c.chartist[j]) {
    double w = c.ema_w[j];
    double m = c.trend[j * c.n + i];
    if (c.trial_trend)
      m = (1.0 - w) * m + w * ((p - c.prev_price[i]) / c.prev_price[i]);
    return m + (1.0 + c.growth[i]) * c.dividend[i] / p;
  }
  return (c.growth[i] * c.fundamental[i] +
          c.reversion[j] * (c.fundamental[i] - p) +
          (1.0 + c.growth[i]) * c.dividend[i]) /
         p;
}

// Reference-path demand of agent j at full trial prices, matching the public
// ops bit for bit (same factorization, same clamp order).  Returns wealth and
// weights through the out parameters.
void reference_demand(const DemandContext& c, int j,
                      const Eigen::VectorXd& trial, Eigen::VectorXd& z_out,
                      Eigen::VectorXd& pi_out, double& wealth_out) {
  const Population& pop = *c.pop;
  const AgentLedger& ledger = pop.ledgers[j];
  z_out.setZero(c.n);
  pi_out.setZero(c.n);
  wealth_out = ledger.wealth;
  if (!c.active[j]) return;

  Eigen::VectorXd& excess = c.vec_a;
  for (int i = 0; i < c.n; ++i)
    excess[i] = ctx_expected_return(c, j, i, trial[i]) - c.r;

  // LDLT solve with one refinement pass, as solve_spd does
  Eigen::VectorXd& x = c.vec_b;
  x = c.ldlt[j].solve(excess);
  c.vec_c = excess - c.sigma[j] * x;
  x += c.ldlt[j].solve(c.vec_c);

  // Same two-stage clamp as clamp_weights, written with identical arithmetic
  // so both paths agree to the last bit: per-asset bounds first, then a
  // proportional rescale if the gross risky proportion exceeds the cap.
  for (int i = 0; i < c.n; ++i)
    pi_out[i] = clampd(x[i] * c.lambda_inv[j], c.wmin[j], c.wmax[j]) + 0.0;
  const double cap = std::max(c.wmax[j], -c.wmin[j]);
  double gross = 0.0;
  for (int i = 0; i < c.n; ++i) gross += std::abs(pi_out[i]);
  if (gross > cap) {
    const double scale = cap / gross;
    for (int i = 0; i < c.n; ++i) pi_out[i] = pi_out[i] * scale + 0.0;
  }

  // Positions are sized off the fixed pre-trade wealth; the settlement
  // wealth reported back reprices the held portfolio at the trial prices.
  Eigen::Map<const Eigen::VectorXd> prev(c.prev_price.data(), c.n);
  Eigen::Map<const Eigen::VectorXd> divs(c.dividend.data(), c.n);
  wealth_out =
      wealth_update(ledger.wealth, ledger.weights, trial, prev, divs, c.r)
          .wealth;

  for (int i = 0; i < c.n; ++i) {
    double want = c.sizing_wealth[j] * pi_out[i] / trial[i];
    z_out[i] = clampd(want, c.zmin[j], c.zmax[j]) + 0.0;
  }
}

void reference_excess(const DemandContext& c, const Eigen::VectorXd& trial,
                      Eigen::VectorXd& out) {
  out.setZero(c.n);
  Eigen::VectorXd z(c.n), pi(c.n);
  double w = 0.0;
  for (int j = 0; j < c.N; ++j) {
    reference_demand(c, j, trial, z, pi, w);
    out += z;
  }
  for (int i = 0; i < c.n; ++i) out[i] -= c.supply[i];
}

// Fast path for the per-asset root search: with the other prices frozen an
// agent's raw weight on every asset m is affine in the scanned asset's excess
// return, raw_m = base_m + col_m * (e_i(p) - r), where base_m collects the
// contributions of the frozen assets and col_m is the (m, i) entry of the
// scaled inverse covariance.  The gross rescale couples the scanned asset to
// the frozen ones, so each probe rebuilds the clamped weight vector; that is
// O(n) per agent and n is small.
struct AssetSolver {
  const DemandContext* c = nullptr;
  int asset = -1;
  std::vector<double> base;     // N x n: weight pieces independent of p
  std::vector<double> col;      // N x n: sensitivity to the own excess

  void prepare(const DemandContext& ctx, int i, const double* trial) {
    c = &ctx;
    asset = i;
    const int n = ctx.n;
    base.assign(static_cast<size_t>(ctx.N) * n, 0.0);
    col.assign(static_cast<size_t>(ctx.N) * n, 0.0);
    for (int j = 0; j < ctx.N; ++j) {
      if (!ctx.active[j]) continue;
      const Eigen::MatrixXd& B = ctx.scaled_inv[j];
      for (int m = 0; m < n; ++m) {
        double acc = 0.0;
        for (int k = 0; k < n; ++k)
          if (k != i)
            acc += B(m, k) * (ctx_expected_return(ctx, j, k, trial[k]) - ctx.r);
        base[static_cast<size_t>(j) * n + m] = acc;
        col[static_cast<size_t>(j) * n + m] = B(m, i);
      }
    }
  }

  double excess(double p) const {
    const DemandContext& ctx = *c;
    const int i = asset;
    const int n = ctx.n;
    double acc = 0.0;
    for (int j = 0; j < ctx.N; ++j) {
      if (!ctx.active[j]) continue;
      const double t = ctx_expected_return(ctx, j, i, p) - ctx.r;
      const double* bj = base.data() + static_cast<size_t>(j) * n;
      const double* cj = col.data() + static_cast<size_t>(j) * n;
      double own = 0.0;
      double gross = 0.0;
      for (int m = 0; m < n; ++m) {
        const double pm = clampd(bj[m] + cj[m] * t, ctx.wmin[j], ctx.wmax[j]);
        if (m == i) own = pm;
        gross += std::abs(pm);
      }
      const double cap = std::max(ctx.wmax[j], -ctx.wmin[j]);
      if (gross > cap) own *= cap / gross;
      const double z =
          clampd(ctx.sizing_wealth[j] * own / p, ctx.zmin[j], ctx.zmax[j]);
      acc += z;
    }
    return acc - ctx.supply[i];
  }
};

struct RootOutcome {
  double root = 0.0;
  bool found = false;
};

// Directional crossing search from the center followed by bisection.  The
// scan moves in fine multiplicative steps so the crossing nearest the
// previous price is bracketed first: excess-demand curves here can have
// several roots, and a tatonnement auctioneer adjusting gradually settles on
// the nearby one, not a distant basin.  Once the fine window is exhausted
// the step widens geometrically out to the bracket limits.  If the hinted
// side never flips sign the other side is scanned before giving up.
RootOutcome solve_asset_price(const AssetSolver& solver, double center,
                              double f_center, double lo_limit,
                              double hi_limit, double goal, int max_bisect) {
  RootOutcome out;
  constexpr int kFineProbes = 48;
  constexpr double kFineStep = 1.01;
  auto scan = [&](bool upward) -> bool {
    double a = center;
    double fa = f_center;
    double g = kFineStep;
    for (int probe = 0; probe < 64; ++probe) {
      if (probe >= kFineProbes) g *= 2.0;
      double b = upward ? std::min(a * g, hi_limit)
                        : std::max(a / g, lo_limit);
      if (b == a) return false;  // limit reached without a sign change
      double fb = solver.excess(b);
      if (std::abs(fb) <= goal) {
        out.root = b;
        out.found = true;
        return true;
      }
      if ((fa > 0.0) != (fb > 0.0)) {
        // Bisect inside the bracket.  Acceptance is on the residual alone:
        // stopping on interval width can hand back a point whose excess is
        // still large where the curve is steep, and that error then leaks
        // into the other assets through the sweep.  If the bracket collapses
        // to machine resolution first, the best point seen is returned.
        double x0 = std::min(a, b), x1 = std::max(a, b);
        double f0 = upward ? fa : fb;
        double best = b;
        double best_f = std::abs(fb);
        if (std::abs(fa) < best_f) {
          best = a;
          best_f = std::abs(fa);
        }
        for (int it = 0; it < max_bisect; ++it) {
          double mid = 0.5 * (x0 + x1);
          if (mid <= x0 || mid >= x1) break;
          double fm = solver.excess(mid);
          if (std::abs(fm) < best_f) {
            best = mid;
            best_f = std::abs(fm);
          }
          if (best_f <= goal) break;
          if ((fm > 0.0) == (f0 > 0.0)) {
            x0 = mid;
            f0 = fm;
          } else {
            x1 = mid;
          }
        }
        out.root = best;
        out.found = true;
        return true;
      }
      a = b;
      fa = fb;
    }
    return false;
  };

  bool up_first = f_center > 0.0;  // excess demand pushes the price up
  if (scan(up_first)) return out;
  if (scan(!up_first)) return out;
  return out;
}

}  // namespace

Eigen::VectorXd agent_demand_at(const Eigen::VectorXd& trial_prices,
                                const AgentProfile& profile,
                                const BeliefState& belief,
                                const AgentLedger& ledger,
                                const MarketState& market) {
  const int n = market.assets();
  require(n >= 1, "agent demand: market must have at least one asset");
  require(trial_prices.size() == n,
          "agent demand: trial price count must match asset count");
  require((trial_prices.array() > 0.0).all(),
          "agent demand: trial prices must be positive");
  require(profile.correlation.rows() == n && belief.variance.size() == n &&
              belief.trend.size() == n && ledger.weights.size() == n,
          "agent demand: agent state sized for a different asset count");

  if (ledger.bankrupt) return Eigen::VectorXd::Zero(n);

  Eigen::VectorXd expected(n);
  for (int i = 0; i < n; ++i) {
    const AssetState& st = market.states[i];
    expected[i] = agent_expected_return(
        profile, belief.trend[i], trial_prices[i], st.price, st.fundamental,
        st.dividend, market.params[i].dividend_growth,
        market.trend_uses_trial_price);
  }
  Eigen::MatrixXd cov =
      market.demand_uses_correlations
          ? assemble_covariance(belief.variance.cwiseSqrt(),
                                profile.correlation)
          : Eigen::MatrixXd(belief.variance.asDiagonal());
  Eigen::VectorXd pi =
      optimal_weights(expected, cov, market.risk_free_rate,
                      profile.risk_aversion, profile.weight_min,
                      profile.weight_max);

  // Sizing wealth is the pre-trade mark: holdings at the previous prices
  // plus the dividend and interest just collected.  It does not move with
  // the trial prices; see make_context for why.
  Eigen::VectorXd prev(n), divs(n);
  for (int i = 0; i < n; ++i) {
    prev[i] = market.states[i].price;
    divs[i] = market.states[i].dividend;
  }
  double wealth = wealth_update(ledger.wealth, ledger.weights, prev, prev,
                                divs, market.risk_free_rate)
                      .wealth;
  return desired_positions(wealth, pi, trial_prices, profile.position_min,
                           profile.position_max, false);
}

Eigen::VectorXd aggregate_excess_demand(const Eigen::VectorXd& trial_prices,
                                        const Population& population,
                                        const MarketState& market) {
  const int n = market.assets();
  Eigen::VectorXd total = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < population.size(); ++j)
    total += agent_demand_at(trial_prices, population.profiles[j],
                             population.beliefs[j], population.ledgers[j],
                             market);
  for (int i = 0; i < n; ++i) total[i] -= market.params[i].shares_outstanding;
  return total;
}

ClearingResult clear_market(const Population& population,
                            const MarketState& market,
                            const ClearingConfig& config) {
  const int n = market.assets();
  const int N = population.size();
  require(n >= 1, "clearing: market must have at least one asset");
  require(static_cast<int>(market.states.size()) == n,
          "clearing: asset state count must match asset count");
  require(N >= 1, "clearing: population is empty");
  require(static_cast<int>(population.beliefs.size()) == N &&
              static_cast<int>(population.ledgers.size()) == N,
          "clearing: population arrays have mismatched sizes");
  for (int i = 0; i < n; ++i) {
    require(market.states[i].price > 0.0,
            "clearing: previous price must be positive for asset " +
                std::to_string(i));
    require(market.states[i].dividend >= 0.0 &&
                market.states[i].fundamental > 0.0,
            "clearing: invalid dividend or fundamental for asset " +
                std::to_string(i));
  }
  require(config.residual_tolerance > 0.0,
          "clearing: residual tolerance must be positive");
  require(config.max_outer_sweeps >= 1 && config.max_bisection_steps >= 1,
          "clearing: iteration budgets must be at least 1");
  require(config.price_bracket_factor > 1.0,
          "clearing: price bracket factor must exceed 1");
  require(config.max_bracket_expansions >= 0,
          "clearing: bracket expansion count must be non-negative");
  require(config.damping > 0.0 && config.damping <= 1.0,
          "clearing: damping must lie in (0, 1]");

  DemandContext ctx = make_context(population, market);
  // Per-asset target sits below the joint tolerance: each root left at the
  // goal perturbs its neighbours through the cross demand, so the sweep can
  // only settle the joint residual a factor above what single solves reach.
  const double goal = 0.25 * config.residual_tolerance;

  std::vector<double> trial(ctx.prev_price);
  AssetSolver solver;
  Eigen::VectorXd residuals(n);
  Eigen::Map<Eigen::VectorXd> trial_vec(trial.data(), n);

  bool converged = false;
  int sweeps = 0;
  // Sweep-iterate history for Aitken extrapolation.  Near the joint root the
  // sweep map is close to affine, so successive iterates approach the fixed
  // point geometrically (or orbit it); the delta-squared extrapolate lands
  // near the limit in one move.  Accepted only when it measurably improves
  // the reference residual, so the plain sweep remains the baseline.
  Eigen::VectorXd hist0(n), hist1(n), hist2(n), accel(n), accel_res(n);
  int hist_len = 0;
  double res_norm = std::numeric_limits<double>::infinity();
  double prev_norm = std::numeric_limits<double>::infinity();
  // Step factor applied to each single-asset move.  Starts at the configured
  // damping and shrinks while sweeps fail to contract: early in a run the
  // investors' demand steps pile up at one price, and a full move on one
  // asset throws the others past their own steps, so iterates orbit the
  // joint root instead of approaching it.  Smaller steps restore the
  // contraction, and the factor recovers as soon as progress does.
  double step_scale = config.damping;
  Eigen::VectorXd sweep_start(n), cand(n), cand_res(n);
  // Best iterate seen so far.  The sweep map is not a descent method, so the
  // final iterate need not be the best one; failures report the best point,
  // and a long stretch without improving it means further sweeps are circling
  // and the loop may as well stop.
  Eigen::VectorXd best_vec(n), best_residuals(n);
  double best_res = std::numeric_limits<double>::infinity();
  int stall = 0;
  const double span_all = std::pow(config.price_bracket_factor,
                                   1.0 + config.max_bracket_expansions);
  int bracket_fail = -1;
  // One damped sweep of per-asset root solves, applied to `trial` in place.
  // Returns false (with bracket_fail set) when some asset shows no sign
  // change in its maximal bracket.
  auto gs_sweep = [&](double scale) -> bool {
    for (int i = 0; i < n; ++i) {
      solver.prepare(ctx, i, trial.data());
      double center = trial[i];
      double fc = solver.excess(center);
      if (std::abs(fc) <= goal) continue;
      double lo_limit = ctx.prev_price[i] / span_all;
      double hi_limit = ctx.prev_price[i] * span_all;
      RootOutcome rt = solve_asset_price(solver, center, fc, lo_limit,
                                         hi_limit, goal,
                                         config.max_bisection_steps);
      if (!rt.found) {
        bracket_fail = i;
        return false;
      }
      trial[i] = center + scale * (rt.root - center);
    }
    return true;
  };
  // Bisect a common scale factor on the whole price vector against the sum
  // of residuals.  Wealth ties the assets together, so a one-sided imbalance
  // is mostly a mispriced level, and the sum tracks that level mode.
  auto level_root = [&](const Eigen::VectorXd& base, double base_sum,
                        double& s_root) -> bool {
    double s_lo = 0.0;
    double s_hi = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      s_lo = std::max(s_lo, ctx.prev_price[i] / span_all / base[i]);
      s_hi = std::min(s_hi, ctx.prev_price[i] * span_all / base[i]);
    }
    auto net_at = [&](double s) {
      cand = base * s;
      reference_excess(ctx, cand, cand_res);
      return cand_res.sum();
    };
    const bool upward = base_sum > 0.0;
    double sa = 1.0;
    double ga = base_sum;
    double step = 1.005;
    bool bracketed = false;
    for (int probe = 0; probe < 40 && !bracketed; ++probe) {
      double sb = upward ? std::min(sa * step, s_hi)
                         : std::max(sa / step, s_lo);
      if (sb == sa) break;
      double gb = net_at(sb);
      if ((ga > 0.0) != (gb > 0.0)) {
        double x0 = std::min(sa, sb), x1 = std::max(sa, sb);
        double f0 = upward ? ga : gb;
        for (int it = 0; it < 60; ++it) {
          double mid = 0.5 * (x0 + x1);
          if (mid <= x0 || mid >= x1) break;
          double gm = net_at(mid);
          if ((gm > 0.0) == (f0 > 0.0)) {
            x0 = mid;
            f0 = gm;
          } else {
            x1 = mid;
          }
        }
        s_root = 0.5 * (x0 + x1);
        bracketed = true;
      } else {
        sa = sb;
        ga = gb;
        step *= 1.6;
      }
    }
    return bracketed;
  };
  for (int sweep = 1; sweep <= config.max_outer_sweeps && !converged;
       ++sweep) {
    sweeps = sweep;
    sweep_start = trial_vec;
    if (!gs_sweep(step_scale)) {
      reference_excess(ctx, trial_vec, residuals);
      throw ClearingError(
          "clearing: no sign change for asset " +
              std::to_string(bracket_fail) + " within the bracket [" +
              std::to_string(ctx.prev_price[bracket_fail] / span_all) + ", " +
              std::to_string(ctx.prev_price[bracket_fail] * span_all) + "]",
          residuals);
    }
    reference_excess(ctx, trial_vec, residuals);
    res_norm = residuals.cwiseAbs().maxCoeff();
    converged = res_norm <= config.residual_tolerance;
    if (std::getenv("MARKETLAB_TRACE") && (sweep <= 30 || sweep % 10 == 0)) {
      std::fprintf(stderr,
                   "sw %3d sc %.3f trial %.9f %.9f %.9f res %+.3e %+.3e %+.3e\n",
                   sweep, step_scale, trial[0], trial[1], trial[2],
                   residuals[0], residuals[1], residuals[2]);
    }

    if (converged) break;
    // Extend the sweep step along its own direction while that verifiably
    // helps.  When many investors sit against their weight or position
    // bounds, demand responds to prices mostly through wealth, the sweep
    // map's contraction rate approaches one, and iterates crawl: the whole
    // price vector translates a fraction of a percent per sweep with the
    // imbalance barely moving.  Doubling the step until the measured
    // residual stops improving crosses such a stretch in a few evaluations,
    // and because every candidate is checked there is no risk of adopting
    // a point worse than the plain sweep's.
    if (res_norm <= 4.0 * prev_norm) {
      const Eigen::VectorXd delta = trial_vec - sweep_start;
      double alpha = 2.0;
      bool adopted = false;
      for (int tries = 0; tries < 8; ++tries) {
        cand = sweep_start + (1.0 + alpha) * delta;
        if (!(cand.array() > 0.0).all()) break;
        reference_excess(ctx, cand, cand_res);
        const double cand_norm = cand_res.cwiseAbs().maxCoeff();
        if (cand_norm >= res_norm) break;
        trial_vec = cand;
        residuals = cand_res;
        res_norm = cand_norm;
        adopted = true;
        alpha *= 2.0;
      }
      if (adopted) {
        hist_len = 0;
        converged = res_norm <= config.residual_tolerance;
        if (converged) break;
      }
    }
    // A one-sided imbalance, every asset in excess supply or every asset in
    // excess demand, is mostly a mispriced level: wealth ties the assets
    // together, so the sweep shuffles relative prices while the level closes
    // at the map's slowest rate.  Solving for a common scale factor on the
    // whole vector collapses that mode in one shot.  The result is adopted
    // only when the measured residual actually improves.
    if ((residuals.array() > 0.0).all() || (residuals.array() < 0.0).all()) {
      double s_root = 0.0;
      if (level_root(trial_vec, residuals.sum(), s_root)) {
        cand = trial_vec * s_root;
        reference_excess(ctx, cand, cand_res);
        const double cand_norm = cand_res.cwiseAbs().maxCoeff();
        if (cand_norm < res_norm) {
          trial_vec = cand;
          residuals = cand_res;
          res_norm = cand_norm;
          hist_len = 0;
          converged = res_norm <= config.residual_tolerance;
          if (converged) break;
        }
      }
    }
    // Orbit-center candidates.  The weight-rescale stage ties an investor's
    // three holdings together, so a price move in one asset shifts demand in
    // the others by a comparable amount; when many investors sit in that
    // regime the sweep map stops contracting and iterates circle the joint
    // root instead of settling on it.  For a near-affine map the center of a
    // period-two orbit is the fixed point itself, so the midpoint of
    // consecutive iterates, and the mean of three for longer cycles, are
    // natural candidates.  Adopted only on measured improvement.
    if (step_scale < config.damping) {
      cand = 0.5 * (sweep_start + trial_vec);
      if ((cand.array() > 0.0).all()) {
        reference_excess(ctx, cand, cand_res);
        const double cand_norm = cand_res.cwiseAbs().maxCoeff();
        if (cand_norm < res_norm) {
          trial_vec = cand;
          residuals = cand_res;
          res_norm = cand_norm;
          hist_len = 0;
          converged = res_norm <= config.residual_tolerance;
          if (converged) break;
        }
      }
      if (hist_len >= 2) {
        cand = (hist1 + hist2 + trial_vec) / 3.0;
        if ((cand.array() > 0.0).all()) {
          reference_excess(ctx, cand, cand_res);
          const double cand_norm = cand_res.cwiseAbs().maxCoeff();
          if (cand_norm < res_norm) {
            trial_vec = cand;
            residuals = cand_res;
            res_norm = cand_norm;
            hist_len = 0;
            converged = res_norm <= config.residual_tolerance;
            if (converged) break;
          }
        }
      }
    }
    // Shrink only on genuine worsening, not slow progress: a residual that
    // still falls, however gradually, is a contraction Aitken can finish,
    // while one that grows means the iterates are orbiting and smaller
    // steps are needed to pull them in.
    const double scale_before = step_scale;
    if (res_norm > 1.02 * prev_norm) {
      step_scale = std::max(0.0625 * config.damping, 0.5 * step_scale);
    } else if (step_scale < config.damping && res_norm < 0.5 * prev_norm) {
      step_scale = std::min(config.damping, 2.0 * step_scale);
    }
    if (step_scale != scale_before) hist_len = 0;  // damped map differs
    hist0 = hist1;
    hist1 = hist2;
    hist2 = trial_vec;
    hist_len = std::min(hist_len + 1, 3);
    if (hist_len == 3) {
      bool usable = true;
      for (int i = 0; i < n && usable; ++i) {
        const double d1 = hist1[i] - hist0[i];
        const double d2 = hist2[i] - hist1[i];
        const double dd = d2 - d1;
        if (std::abs(dd) < 1e-300) {
          accel[i] = hist2[i];
          continue;
        }
        accel[i] = hist2[i] - d2 * d2 / dd;
        if (!std::isfinite(accel[i]) || accel[i] <= 0.0) usable = false;
      }
      if (usable) {
        reference_excess(ctx, accel, accel_res);
        const double accel_norm = accel_res.cwiseAbs().maxCoeff();
        if (accel_norm < 0.5 * res_norm) {
          trial_vec = accel;
          residuals = accel_res;
          res_norm = accel_norm;
          converged = res_norm <= config.residual_tolerance;
          hist_len = 0;
        }
      }
    }
    prev_norm = res_norm;
    if (res_norm < best_res) {
      best_res = res_norm;
      best_vec = trial_vec;
      best_residuals = residuals;
      stall = 0;
    } else if (++stall >= 40) {
      break;  // circling; the best point is not going to improve
    }
  }

  if (!converged && best_res < res_norm) {
    trial_vec = best_vec;
    residuals = best_residuals;
    res_norm = best_res;
  }
  // A one-sided stall can hide the root behind a locally worse residual:
  // the crowded side of the book unpins only after the level moves, so the
  // max residual rises before it falls and every locally verified candidate
  // refuses the move.  Commit to the level's own zero, let damped sweeps
  // repair relative prices from there, and keep the excursion only when the
  // end point beats the checkpoint.
  for (int round = 0; round < 3 && !converged; ++round) {
    if (!((residuals.array() > 0.0).all() || (residuals.array() < 0.0).all()))
      break;
    const Eigen::VectorXd save_vec = trial_vec;
    const Eigen::VectorXd save_res = residuals;
    const double save_norm = res_norm;
    double s_root = 0.0;
    if (!level_root(trial_vec, residuals.sum(), s_root)) break;
    trial_vec *= s_root;
    bool ok = true;
    for (int k = 0; k < 30; ++k) {
      if (!gs_sweep(0.5)) {
        ok = false;
        break;
      }
      reference_excess(ctx, trial_vec, residuals);
      res_norm = residuals.cwiseAbs().maxCoeff();
      if (res_norm <= config.residual_tolerance) break;
    }
    converged = ok && res_norm <= config.residual_tolerance;
    if (!converged && !(ok && res_norm < 0.9 * save_norm)) {
      trial_vec = save_vec;
      residuals = save_res;
      res_norm = save_norm;
      break;
    }
  }
  if (!converged) {
    // Sweeps circle a root they cannot enter: when an investor's total weight
    // sits against its bound, a price move in one asset drags that investor's
    // demand in every asset by a comparable amount, and coordinate-wise root
    // finding stops contracting no matter the damping.  The root still exists
    // (demand is continuous in the price vector), so finish with a direct
    // simplex descent on the residual sum of squares over log prices.
    // Deterministic, bounded to the same bracket box, and adopted only if it
    // improves on the sweeps' best point.
    Eigen::VectorXd lo_log(n), hi_log(n);
    for (int i = 0; i < n; ++i) {
      lo_log[i] = std::log(ctx.prev_price[i] / span_all);
      hi_log[i] = std::log(ctx.prev_price[i] * span_all);
    }
    auto eval = [&](const Eigen::VectorXd& x) {
      for (int i = 0; i < n; ++i)
        cand[i] = std::exp(std::min(std::max(x[i], lo_log[i]), hi_log[i]));
      reference_excess(ctx, cand, cand_res);
      return cand_res.squaredNorm();
    };
    const double tol_sq =
        config.residual_tolerance * config.residual_tolerance;
    std::vector<Eigen::VectorXd> pts(n + 1, Eigen::VectorXd(n));
    std::vector<double> val(n + 1);
    Eigen::VectorXd centroid(n), xr(n), xe(n), xc(n);
    const int budget = 60 * n * config.max_bisection_steps / 10;
    int evals = 0;
    Eigen::VectorXd start_log = trial_vec.array().log();
    double start_val = residuals.squaredNorm();
    for (double size : {1e-3, 1e-4}) {
      pts[0] = start_log;
      val[0] = start_val;
      for (int k = 1; k <= n; ++k) {
        pts[k] = pts[0];
        pts[k][k - 1] += size;
        val[k] = eval(pts[k]);
        ++evals;
      }
      while (evals < budget) {
        int worst = 0, low = 0;
        for (int k = 1; k <= n; ++k) {
          if (val[k] > val[worst]) worst = k;
          if (val[k] < val[low]) low = k;
        }
        if (val[low] <= tol_sq) break;
        centroid.setZero();
        for (int k = 0; k <= n; ++k)
          if (k != worst) centroid += pts[k];
        centroid /= n;
        if ((centroid - pts[worst]).cwiseAbs().maxCoeff() < 1e-14) break;
        xr = centroid + (centroid - pts[worst]);
        double fr = eval(xr);
        ++evals;
        if (fr < val[low]) {
          xe = centroid + 2.0 * (centroid - pts[worst]);
          double fe = eval(xe);
          ++evals;
          if (fe < fr) {
            pts[worst] = xe;
            val[worst] = fe;
          } else {
            pts[worst] = xr;
            val[worst] = fr;
          }
        } else {
          int second_worst = worst == 0 ? 1 : 0;
          for (int k = 0; k <= n; ++k)
            if (k != worst && val[k] > val[second_worst]) second_worst = k;
          if (fr < val[second_worst]) {
            pts[worst] = xr;
            val[worst] = fr;
          } else {
            xc = centroid + 0.5 * (pts[worst] - centroid);
            double fc2 = eval(xc);
            ++evals;
            if (fc2 < val[worst]) {
              pts[worst] = xc;
              val[worst] = fc2;
            } else {
              for (int k = 0; k <= n; ++k) {
                if (k == low) continue;
                pts[k] = pts[low] + 0.5 * (pts[k] - pts[low]);
                val[k] = eval(pts[k]);
                ++evals;
              }
            }
          }
        }
      }
      int low = 0;
      for (int k = 1; k <= n; ++k)
        if (val[k] < val[low]) low = k;
      start_log = pts[low];
      start_val = val[low];
      if (start_val <= tol_sq) break;
    }
    eval(start_log);
    const double cand_norm = cand_res.cwiseAbs().maxCoeff();
    if (cand_norm < res_norm) {
      trial_vec = cand;
      residuals = cand_res;
      res_norm = cand_norm;
      converged = res_norm <= config.residual_tolerance;
    }
  }
  if (!converged) {
    if (std::getenv("MARKETLAB_TRACE")) {
      Eigen::VectorXd zp(n), pp(n), zt(n), pt(n);
      Eigen::Map<const Eigen::VectorXd> prevp(ctx.prev_price.data(), n);
      std::fprintf(stderr, "FAIL dump: prev %.6f %.6f %.6f trial %.6f %.6f %.6f\n",
                   ctx.prev_price[0], ctx.prev_price[1], ctx.prev_price[2],
                   trial[0], trial[1], trial[2]);
      for (int j = 0; j < N; ++j) {
        double wp = 0.0, wt = 0.0;
        reference_demand(ctx, j, prevp, zp, pp, wp);
        reference_demand(ctx, j, trial_vec, zt, pt, wt);
        const auto& prof = population.profiles[j];
        const auto& bel = population.beliefs[j];
        std::fprintf(stderr,
                     "  j%02d %c tau %5.1f W %6.2f|%6.2f pi %+5.2f|%+5.2f z "
                     "%+6.2f %+6.2f %+6.2f | %+6.2f %+6.2f %+6.2f m %+0.4f "
                     "%+0.4f %+0.4f v %.1e %.1e %.1e\n",
                     j, prof.kind == AgentKind::Fundamentalist ? 'F' : 'C',
                     prof.ema_period, wp, wt, pp.sum(), pt.sum(), zp[0], zp[1],
                     zp[2], zt[0], zt[1], zt[2], bel.trend[0], bel.trend[1],
                     bel.trend[2], bel.variance[0], bel.variance[1],
                     bel.variance[2]);
      }
    }
    throw ClearingError("clearing: residual " +
                            std::to_string(residuals.cwiseAbs().maxCoeff()) +
                            " still above tolerance after " +
                            std::to_string(sweeps) + " sweeps",
                        residuals);
  }

  ClearingResult result;
  result.prices = trial_vec;
  result.positions.resize(N);
  result.weights.resize(N);
  result.wealth.resize(N);
  result.sweeps = sweeps;
  result.residual = residuals.cwiseAbs().maxCoeff();
  Eigen::VectorXd z(n), pi(n);
  const bool cohort_trace = std::getenv("MARKETLAB_COHORT") != nullptr;
  Eigen::VectorXd zf = Eigen::VectorXd::Zero(n), zc = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd efmin(n), efmax(n), ecmin(n), ecmax(n);
  efmin.setConstant(1e300); ecmin.setConstant(1e300);
  efmax.setConstant(-1e300); ecmax.setConstant(-1e300);
  std::vector<int> Lf(n, 0), If(n, 0), Sf(n, 0), Lc(n, 0), Ic(n, 0), Sc(n, 0);
  for (int j = 0; j < N; ++j) {
    double wealth = 0.0;
    reference_demand(ctx, j, result.prices, z, pi, wealth);
    result.positions[j] = z;
    result.wealth[j] = wealth;
    Eigen::VectorXd realized = Eigen::VectorXd::Zero(n);
    if (wealth > kBankruptcyFloor)
      for (int i = 0; i < n; ++i)
        realized[i] = z[i] * result.prices[i] / wealth;
    result.weights[j] = realized;
    if (cohort_trace && ctx.active[j]) {
      for (int i = 0; i < n; ++i) {
        double e = ctx_expected_return(ctx, j, i, result.prices[i]) - ctx.r;
        bool ch = ctx.chartist[j];
        (ch ? zc : zf)[i] += z[i];
        (ch ? ecmin : efmin)[i] = std::min((ch ? ecmin : efmin)[i], e);
        (ch ? ecmax : efmax)[i] = std::max((ch ? ecmax : efmax)[i], e);
        if (pi[i] >= ctx.wmax[j] - 1e-12) ++(ch ? Lc : Lf)[i];
        else if (pi[i] <= ctx.wmin[j] + 1e-12) ++(ch ? Sc : Sf)[i];
        else ++(ch ? Ic : If)[i];
      }
    }
  }
  if (cohort_trace) {
    static int ct_step = 0;
    ++ct_step;
    for (int i = 0; i < n; ++i)
      std::fprintf(stderr,
                   "CT%04d a%d P%10.4f<-%10.4f f[%+9.2e,%+9.2e] zf%+8.2f "
                   "%2dL%2dI%2dS | c[%+9.2e,%+9.2e] zc%+8.2f %2dL%2dI%2dS\n",
                   ct_step, i, result.prices[i], ctx.prev_price[i], efmin[i],
                   efmax[i], zf[i], Lf[i], If[i], Sf[i], ecmin[i], ecmax[i],
                   zc[i], Lc[i], Ic[i], Sc[i]);
  }
  return result;
}

}  // namespace marketlab
