// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dmu/autodiff.hpp"

namespace dmu {

struct Parameter {
  std::string name;
  ad::Matrix value;
};

/// Ordered list of named parameters. Names are unique within one list.
class ParameterList {
 public:
  Parameter& add(std::string name, ad::Matrix value);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  const Parameter* find(const std::string& name) const;
  /// Total number of scalar weights.
  std::size_t scalar_count() const;

  /// Records every parameter as a tape leaf, in list order.
  std::vector<ad::Var> bind(ad::Tape& tape) const;

 private:
  std::vector<Parameter> params_;
};

/// Non-owning flat view over the parameters of a composite model.
using ParameterRefs = std::vector<Parameter*>;

/// Adjoints of bound parameter leaves after backward().
std::vector<ad::Matrix> gradients(const ad::Tape& tape, std::span<const ad::Var> bound);

/// JSON file: {"format": "dmu-parameters", "version": 1,
///             "parameters": [{"name", "rows", "cols", "values": [row-major]}]}
void save_parameters(const std::filesystem::path& path,
                     std::span<const Parameter* const> params);
/// Loads values by name into existing parameters; shapes must match and every
/// parameter must be present in the file.
void load_parameters(const std::filesystem::path& path, std::span<Parameter* const> params);

}  // namespace dmu
