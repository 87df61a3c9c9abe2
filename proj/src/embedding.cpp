#include "pir/embedding.hpp"

#include <cmath>
#include <string>

namespace pir {

void EmbeddingMatrix::check_finite() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) {
            throw std::invalid_argument("non-finite embedding value at row " + std::to_string(i / (dim_ ? dim_ : 1)));
        }
    }
}

double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace pir
