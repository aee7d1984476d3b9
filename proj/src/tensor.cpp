#include "counterfact/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

namespace cfx {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  if (shape_.size() > 3) throw ShapeError("tensor rank " + std::to_string(shape_.size()) + " exceeds 3");
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 3) throw ShapeError("tensor rank " + std::to_string(shape_.size()) + " exceeds 3");
  if (product(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                     " elements");
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
  return shape_[axis];
}

void Tensor::fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) throw ShapeError("cannot add " + shape_string(other.shape_) + " to " + shape_string(shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) noexcept {
  for (double& v : data_) v *= s;
  return *this;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor round_to_f32(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.storage()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

Tensor& ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  entries_.push_back({std::move(name), std::move(value)});
  return entries_.back().value;
}

bool ParamSet::contains(const std::string& name) const noexcept {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  throw ConfigError("unknown parameter '" + name + "'");
}

Tensor& ParamSet::get(const std::string& name) { return entries_[index_of(name)].value; }
const Tensor& ParamSet::get(const std::string& name) const { return entries_[index_of(name)].value; }

std::size_t ParamSet::numel() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& e : entries_) out.entries_.push_back({e.name, Tensor::zeros_like(e.value)});
  return out;
}

void ParamSet::set_zero() noexcept {
  for (auto& e : entries_) e.value.fill(0.0);
}

bool ParamSet::same_structure(const ParamSet& other) const noexcept {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (!entries_[i].value.same_shape(other.entries_[i].value)) return false;
  }
  return true;
}

bool ParamSet::all_finite() const noexcept {
  for (const auto& e : entries_)
    if (!e.value.all_finite()) return false;
  return true;
}

ParamSet& ParamSet::operator+=(const ParamSet& other) {
  if (!same_structure(other)) throw ShapeError("parameter sets differ in structure");
  for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].value += other.entries_[i].value;
  return *this;
}

ParamSet& ParamSet::operator*=(double s) noexcept {
  for (auto& e : entries_) e.value *= s;
  return *this;
}

double ParamSet::squared_norm() const noexcept {
  double s = 0.0;
  for (const auto& e : entries_)
    for (double v : e.value.data()) s += v * v;
  return s;
}

void ParamSet::append(const ParamSet& other, const std::string& prefix) {
  for (const auto& e : other.entries_) add(prefix + e.name, e.value);
}

}  // namespace cfx
