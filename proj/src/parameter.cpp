// SPDX-License-Identifier: Apache-2.0
#include "dmu/parameter.hpp"

#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace dmu {

using json = nlohmann::json;

Parameter& ParameterList::add(std::string name, ad::Matrix value) {
  if (find(name) != nullptr) {
    throw std::invalid_argument("duplicate parameter name '" + name + "'");
  }
  params_.push_back(Parameter{std::move(name), std::move(value)});
  return params_.back();
}

const Parameter* ParameterList::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::size_t ParameterList::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<ad::Var> ParameterList::bind(ad::Tape& tape) const {
  std::vector<ad::Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.leaf(p.value));
  return vars;
}

std::vector<ad::Matrix> gradients(const ad::Tape& tape, std::span<const ad::Var> bound) {
  std::vector<ad::Matrix> grads;
  grads.reserve(bound.size());
  for (const auto& v : bound) grads.push_back(tape.read_adjoint(v));
  return grads;
}

void save_parameters(const std::filesystem::path& path,
                     std::span<const Parameter* const> params) {
  json doc;
  doc["format"] = "dmu-parameters";
  doc["version"] = 1;
  json list = json::array();
  for (const Parameter* p : params) {
    list.push_back({{"name", p->name},
                    {"rows", p->value.rows()},
                    {"cols", p->value.cols()},
                    {"values", p->value.values()}});
  }
  doc["parameters"] = std::move(list);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump(1) << '\n';
}

void load_parameters(const std::filesystem::path& path, std::span<Parameter* const> params) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const json doc = json::parse(in);
  if (doc.value("format", "") != "dmu-parameters") {
    throw std::runtime_error(path.string() + " is not a dmu parameter file");
  }
  std::map<std::string, const json*> by_name;
  for (const auto& entry : doc.at("parameters")) {
    by_name[entry.at("name").get<std::string>()] = &entry;
  }
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      throw std::runtime_error("parameter '" + p->name + "' missing from " + path.string());
    }
    const json& e = *it->second;
    const auto rows = e.at("rows").get<std::size_t>();
    const auto cols = e.at("cols").get<std::size_t>();
    if (rows != p->value.rows() || cols != p->value.cols()) {
      throw ad::DimensionError("parameter '" + p->name + "' has shape (" +
                               std::to_string(rows) + "x" + std::to_string(cols) +
                               ") in file, model expects " + p->value.shape_string());
    }
    p->value = ad::Matrix(rows, cols, e.at("values").get<std::vector<double>>());
  }
}

}  // namespace dmu
