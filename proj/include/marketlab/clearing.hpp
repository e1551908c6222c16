#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

#include "marketlab/types.hpp"

namespace marketlab {

struct ClearingConfig {
  double residual_tolerance = 1e-6;    // shares, per asset
  int max_outer_sweeps = 200;
  int max_bisection_steps = 100;
  double price_bracket_factor = 10.0;  // initial bracket [P/f, P*f]
  int max_bracket_expansions = 3;      // extra widenings by the same factor
  double damping = 1.0;                // fraction of each per-asset move kept
};

struct ClearingResult {
  Eigen::VectorXd prices;
  std::vector<Eigen::VectorXd> positions;  // per agent, shares
  std::vector<Eigen::VectorXd> weights;    // realized, position value / wealth
  std::vector<double> wealth;              // at the cleared prices, unfloored
  int sweeps = 0;
  double residual = 0.0;                   // max abs excess demand
};

class ClearingError : public std::runtime_error {
 public:
  ClearingError(const std::string& what, Eigen::VectorXd residuals);
  const Eigen::VectorXd& residuals() const { return residuals_; }

 private:
  Eigen::VectorXd residuals_;
};

// Demand of one trader at the given trial prices: mean-variance weights from
// the trader's current beliefs, applied to the wealth the trial prices would
// imply, converted to shares and clamped.  market.states carry the previous
// cleared prices plus current dividends and fundamentals.
Eigen::VectorXd agent_demand_at(const Eigen::VectorXd& trial_prices,
                                const AgentProfile& profile,
                                const BeliefState& belief,
                                const AgentLedger& ledger,
                                const MarketState& market);

// Sum of all traders' demands minus shares outstanding, per asset.
Eigen::VectorXd aggregate_excess_demand(const Eigen::VectorXd& trial_prices,
                                        const Population& population,
                                        const MarketState& market);

// Walrasian clearing: sweeps assets in order, solving each one's excess
// demand to zero by bracketed bisection while the other prices stay fixed,
// until the joint residual is within tolerance.  Throws ClearingError with
// the residual profile when no bracket can be certified or the sweep budget
// is exhausted.
ClearingResult clear_market(const Population& population,
                            const MarketState& market,
                            const ClearingConfig& config = {});

}  // namespace marketlab
