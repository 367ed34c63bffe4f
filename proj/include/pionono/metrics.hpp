#pragma once

#include <vector>

#include "pionono/data.hpp"

namespace pionono {

// Pixel-pair counts; rows index the prediction class, columns the reference.
struct Contingency {
    int num_classes = 0;
    std::vector<long long> counts;  // C*C, counts[pred*C + ref]
    long long total = 0;

    long long at(int pred, int ref) const { return counts[static_cast<size_t>(pred) * num_classes + ref]; }
};

// Pixels where either side carries ignore_label (pass -1 to disable) are
// skipped, so sparsely annotated rater masks compare cleanly on both sides.
Contingency make_contingency(const ClassMap& pred, const ClassMap& ref, int num_classes,
                             int ignore_label = kIgnoreLabel);
void accumulate_contingency(Contingency& into, const ClassMap& pred, const ClassMap& ref,
                            int ignore_label = kIgnoreLabel);

enum class KappaWeighting { None, Quadratic };

// Chance-corrected agreement; `undefined-kappa` (NumericError) when expected
// disagreement vanishes without perfect agreement.
double kappa(const Contingency& cont, KappaWeighting weighting);

struct IouResult {
    std::vector<double> per_class;  // NaN for classes absent from both sides
    double mean = 0.0;
};

IouResult iou(const Contingency& cont);
double accuracy(const Contingency& cont);

}  // namespace pionono
