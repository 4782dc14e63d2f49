#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <set>
#include <vector>

#include "mirau/nd/core.hpp"
#include "mirau/rng.hpp"

namespace mirau::nd {

struct GradCheckOptions {
    double eps = 1e-5;
    // 0 = check every coordinate; otherwise a seeded subsample of this many
    // coordinates across all parameters (large nets).
    std::int64_t max_coords = 0;
    std::uint64_t sample_seed = 1234;
    std::uint64_t tape_seed = 0;  // fixed so stochastic ops repeat identically
    double rel_floor = 1e-6;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::int64_t coords_checked = 0;
};

// Compares tape gradients against central finite differences
// (f(x+eps)-f(x-eps))/(2 eps). `buffers` are the leaf values; `build` must
// reconstruct the scalar loss from leaves bound in the same order. Use double
// precision: finite differences are unreliable in float32.
template <typename T>
GradCheckReport grad_check(
    const std::function<Array<T>(Tape<T>&, const std::vector<Array<T>>&)>& build,
    std::vector<std::vector<T>*> buffers, const std::vector<Shape>& shapes,
    const GradCheckOptions& opt = {}) {
    if (buffers.size() != shapes.size()) throw Error("grad_check: buffers/shapes size mismatch");

    // analytic gradients
    std::vector<std::vector<T>> analytic(buffers.size());
    {
        auto tape = std::make_unique<Tape<T>>(opt.tape_seed);
        std::vector<Array<T>> leaves;
        for (std::size_t i = 0; i < buffers.size(); ++i)
            leaves.push_back(tape->leaf(shapes[i], *buffers[i]));
        Array<T> loss = build(*tape, leaves);
        if (loss.numel() != 1) throw Error("grad_check: function output must be scalar");
        tape->backward(loss);
        for (std::size_t i = 0; i < buffers.size(); ++i) {
            const auto& g = leaves[i].grad();
            analytic[i] = g.empty() ? std::vector<T>(buffers[i]->size(), T(0)) : g;
        }
    }

    // choose coordinates
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    std::int64_t total = 0;
    for (const auto* b : buffers) total += static_cast<std::int64_t>(b->size());
    if (opt.max_coords <= 0 || total <= opt.max_coords) {
        for (std::size_t i = 0; i < buffers.size(); ++i)
            for (std::size_t j = 0; j < buffers[i]->size(); ++j) coords.emplace_back(i, j);
    } else {
        Rng rng(mix_seed(opt.sample_seed, 0x67636b /* "gck" */));
        std::set<std::int64_t> chosen;
        while (static_cast<std::int64_t>(chosen.size()) < opt.max_coords)
            chosen.insert(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total))));
        for (std::int64_t flat : chosen) {
            std::size_t i = 0;
            while (flat >= static_cast<std::int64_t>(buffers[i]->size())) {
                flat -= static_cast<std::int64_t>(buffers[i]->size());
                ++i;
            }
            coords.emplace_back(i, static_cast<std::size_t>(flat));
        }
    }

    auto loss_value = [&]() {
        auto tape = std::make_unique<Tape<T>>(opt.tape_seed);
        tape->set_grad_enabled(false);
        std::vector<Array<T>> leaves;
        for (std::size_t i = 0; i < buffers.size(); ++i)
            leaves.push_back(tape->leaf(shapes[i], *buffers[i]));
        return static_cast<double>(build(*tape, leaves).scalar());
    };

    GradCheckReport rep;
    for (auto [pi, ci] : coords) {
        T& slot = (*buffers[pi])[ci];
        const T orig = slot;
        slot = orig + static_cast<T>(opt.eps);
        const double fp = loss_value();
        slot = orig - static_cast<T>(opt.eps);
        const double fm = loss_value();
        slot = orig;
        const double fd = (fp - fm) / (2.0 * opt.eps);
        const double an = static_cast<double>(analytic[pi][ci]);
        const double abs_err = std::abs(fd - an);
        const double rel = abs_err / std::max({std::abs(fd), std::abs(an), opt.rel_floor});
        rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        ++rep.coords_checked;
    }
    return rep;
}

}  // namespace mirau::nd
