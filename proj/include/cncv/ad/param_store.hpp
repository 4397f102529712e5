#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cncv/errors.hpp"

namespace cncv::ad {

/// A named contiguous range of a ParamStore.
struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Flat parameter vector plus named slices that tile it exactly.
class ParamStore {
 public:
  ParamStore() = default;

  /// Appends a zero-initialised slice and returns its index.
  std::size_t add_slice(std::string name, std::size_t length) {
    slices_.push_back({std::move(name), values_.size(), length});
    values_.resize(values_.size() + length, 0.0);
    return slices_.size() - 1;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::vector<ParamSlice>& slices() const noexcept { return slices_; }
  const ParamSlice& slice(std::size_t i) const { return slices_.at(i); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::span<double> view(std::size_t slice_index) {
    const auto& s = slices_.at(slice_index);
    return std::span<double>(values_).subspan(s.offset, s.length);
  }
  std::span<const double> view(std::size_t slice_index) const {
    const auto& s = slices_.at(slice_index);
    return std::span<const double>(values_).subspan(s.offset, s.length);
  }

  void assign(std::span<const double> v) {
    require_dims(v.size(), values_.size(), "ParamStore::assign");
    values_.assign(v.begin(), v.end());
  }

  /// Slices are disjoint, in order, and cover the vector.
  bool tiles_exactly() const noexcept {
    std::size_t next = 0;
    for (const auto& s : slices_) {
      if (s.offset != next) return false;
      next += s.length;
    }
    return next == values_.size();
  }

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::vector<double> values_;
  std::vector<ParamSlice> slices_;
};

}  // namespace cncv::ad
