#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "hmmtrend/error.hpp"

namespace hmmtrend {

/// Symmetric lattice of return levels {-omega, ..., 0, ..., +omega} spaced one
/// tick apart. Observed returns are snapped to the nearest level before any
/// emission lookup.
class TrendGrid {
public:
    TrendGrid(double tick, double omega) : tick_(tick), omega_(omega) {
        if (!(tick > 0.0) || !std::isfinite(tick))
            throw InvalidParameter("grid tick size must be positive");
        if (!(omega >= tick) || !std::isfinite(omega))
            throw InvalidParameter("grid omega must be >= tick size");
        const double steps = omega / tick;
        half_ = static_cast<std::size_t>(std::llround(steps));
        if (std::abs(steps - static_cast<double>(half_)) > 1e-9 * std::max(1.0, steps))
            throw InvalidParameter("grid omega must be an exact multiple of the tick size");
        values_.resize(2 * half_ + 1);
        for (std::size_t i = 0; i < values_.size(); ++i)
            values_[i] = (static_cast<double>(i) - static_cast<double>(half_)) * tick_;
    }

    /// Smallest grid whose omega covers max |returns| (at least one tick).
    static TrendGrid covering(double tick, std::span<const double> returns) {
        double m = 0.0;
        for (double r : returns)
            if (std::isfinite(r)) m = std::max(m, std::abs(r));
        const double steps = std::max(1.0, std::ceil(m / tick - 1e-9));
        return TrendGrid(tick, steps * tick);
    }

    double tick() const noexcept { return tick_; }
    double omega() const noexcept { return omega_; }
    std::size_t size() const noexcept { return values_.size(); }
    const std::vector<double>& values() const noexcept { return values_; }
    double operator[](std::size_t i) const { return values_[i]; }

    /// Index of the grid level nearest to r; values beyond +-omega clamp to the ends.
    std::size_t snap(double r) const {
        if (std::isnan(r)) throw InvalidInput("cannot snap NaN return to grid");
        const double idx = std::round(r / tick_) + static_cast<double>(half_);
        if (idx <= 0.0) return 0;
        const double last = static_cast<double>(values_.size() - 1);
        if (idx >= last) return values_.size() - 1;
        return static_cast<std::size_t>(idx);
    }

    bool operator==(const TrendGrid& o) const noexcept {
        return tick_ == o.tick_ && half_ == o.half_;
    }

private:
    double tick_;
    double omega_;
    std::size_t half_ = 0;
    std::vector<double> values_;
};

}  // namespace hmmtrend
