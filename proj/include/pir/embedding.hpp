#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace pir {

// Dense row-major matrix of feature vectors.
class EmbeddingMatrix {
public:
    EmbeddingMatrix() = default;
    EmbeddingMatrix(std::size_t rows, std::size_t dim) : rows_(rows), dim_(dim), data_(rows * dim, 0.0) {}
    EmbeddingMatrix(std::size_t rows, std::size_t dim, std::vector<double> data)
        : rows_(rows), dim_(dim), data_(std::move(data)) {
        if (data_.size() != rows_ * dim_) {
            throw std::invalid_argument("embedding data length does not match rows x dim");
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t dim() const { return dim_; }
    bool empty() const { return rows_ == 0; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * dim_, dim_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * dim_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * dim_ + j]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    // Throws if any entry is NaN or infinite.
    void check_finite() const;

    friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> data_;
};

double l2_norm(std::span<const double> v);

}  // namespace pir
