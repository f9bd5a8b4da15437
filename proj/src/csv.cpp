#include "mpo/csv.hpp"

#include <cstdio>

namespace mpo {

std::string format_double(double value) {
    char buffer[64];
    std::snprintf(buffer, sizeof buffer, "%.17g", value);
    return buffer;
}

void write_sweep_csv(std::ostream& out, const SweepResult& result) {
    out << "depth,scheme,delta_f\n";
    for (const SweepRecord& record : result.records)
        out << record.depth << "," << scheme_name(record.scheme) << ","
            << format_double(record.delta_f) << "\n";
}

void write_loss_csv(std::ostream& out, const LossCurve& curve) {
    out << "step,loss\n";
    for (size_t s = 0; s < curve.losses.size(); ++s)
        out << s << "," << format_double(curve.losses[s]) << "\n";
}

void write_compare_csv(std::ostream& out, const ConvergenceComparison& comparison) {
    out << "step,scratch_loss,donor_loss\n";
    for (size_t s = 0; s < comparison.scratch.losses.size(); ++s)
        out << s << "," << format_double(comparison.scratch.losses[s]) << ","
            << format_double(comparison.donor_init.losses[s]) << "\n";
}

}  // namespace mpo
