#pragma once

#include <ostream>

#include "mpo/stability.hpp"
#include "mpo/trainer.hpp"

namespace mpo {

/// CSV contracts: fixed column order, one header row, floats printed with
/// 17 significant digits so they round-trip.

/// Header: depth,scheme,delta_f
void write_sweep_csv(std::ostream& out, const SweepResult& result);

/// Header: step,loss
void write_loss_csv(std::ostream& out, const LossCurve& curve);

/// Header: step,scratch_loss,donor_loss
void write_compare_csv(std::ostream& out, const ConvergenceComparison& comparison);

std::string format_double(double value);

}  // namespace mpo
