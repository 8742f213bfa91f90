#pragma once

#include "mmlqg/consistency.hpp"
#include "mmlqg/params.hpp"
#include "mmlqg/riccati.hpp"
#include "mmlqg/types.hpp"

namespace mmlqg {

// Full assumption report: the structural checks of validate() plus the
// PBH rank conditions that only make sense against assembled extended
// systems, i.e. after a mean-field solve.
//
//   - filter side: (extended drift, extended diffusion) stabilizable and
//     (extended observation, extended drift) detectable, for the major and
//     for each minor type;
//   - error stack: (drift, forcing factor) controllable, the condition for
//     a unique positive stationary covariance;
//   - control side: the (rho/2)-shifted extended pairs stabilizable and
//     detectable through the cost rows;
//   - fixed-point existence: reported from solver convergence, not a test.
AssumptionReport check_assumptions(const GameParameters& params,
                                   const MeanFieldSolution& solution,
                                   const StationaryCovariances& stationary);

}  // namespace mmlqg
