#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "modalseg/tensor.hpp"

namespace modalseg {

/// One named weight matrix inside a flat parameter vector.
struct ParamSlot {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Canonical ordering of named parameter blocks in a flat vector. Checkpoints
/// store parameters in exactly this order.
class ParamLayout {
 public:
  std::size_t add(std::string name, int rows, int cols) {
    slots_.push_back({std::move(name), total_, rows, cols});
    total_ += slots_.back().size();
    return slots_.size() - 1;
  }

  const ParamSlot& operator[](std::size_t i) const { return slots_[i]; }
  const std::vector<ParamSlot>& slots() const { return slots_; }
  std::size_t total() const { return total_; }

 private:
  std::vector<ParamSlot> slots_;
  std::size_t total_ = 0;
};

template <class S>
MatMap<S> view(std::span<S> values, const ParamSlot& slot) {
  return MatMap<S>(values.data() + slot.offset, slot.rows, slot.cols);
}

template <class S>
ConstMatMap<S> view(std::span<const S> values, const ParamSlot& slot) {
  return ConstMatMap<S>(values.data() + slot.offset, slot.rows, slot.cols);
}

}  // namespace modalseg
