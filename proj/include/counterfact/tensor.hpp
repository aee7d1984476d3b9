#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "counterfact/error.hpp"

namespace cfx {

// Dense row-major array of doubles with up to three axes (batch x time x feature).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
  static Tensor vector(std::initializer_list<double> values);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Row view of a rank-2 tensor.
  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * shape_[1], shape_[1]}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * shape_[1], shape_[1]};
  }

  void fill(double value) noexcept;
  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  // Elementwise helpers used by optimizers and checks.
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s) noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Rounds every element to the nearest 32-bit float.
Tensor round_to_f32(const Tensor& t);

// Ordered, named collection of parameter tensors.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  Tensor& add(std::string name, Tensor value);
  bool contains(const std::string& name) const noexcept;
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t count() const noexcept { return entries_.size(); }
  Tensor& operator[](std::size_t i) noexcept { return entries_[i].value; }
  const Tensor& operator[](std::size_t i) const noexcept { return entries_[i].value; }

  // Total scalar parameter count.
  std::size_t numel() const noexcept;
  ParamSet zeros_like() const;
  void set_zero() noexcept;
  bool same_structure(const ParamSet& other) const noexcept;
  bool all_finite() const noexcept;
  ParamSet& operator+=(const ParamSet& other);
  ParamSet& operator*=(double s) noexcept;
  double squared_norm() const noexcept;
  // Appends another set's entries, prefixing names.
  void append(const ParamSet& other, const std::string& prefix);

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<Entry> entries_;
};

}  // namespace cfx
