#include "fednpr/payload.hpp"

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace fednpr {

namespace {

constexpr const char* kMagic = "FEDNPR-DELTA-v1";

[[noreturn]] void bad(const std::string& what) { throw Error(ErrorKind::io, "delta payload: " + what); }

}  // namespace

void write_delta(std::ostream& os, const ModelDelta& delta) {
  const auto views = delta.values.tensors();
  os << kMagic << '\n' << "sample_count " << delta.sample_count << '\n' << "tensors " << views.size() << '\n';
  // Shapes come from the layer structure, in the same order as tensors().
  std::vector<std::pair<Index, Index>> shapes;
  for (const auto& l : delta.values.extractor) {
    shapes.emplace_back(l.weight.rows(), l.weight.cols());
    shapes.emplace_back(l.bias.size(), 1);
  }
  shapes.emplace_back(delta.values.classifier.weight.rows(), delta.values.classifier.weight.cols());
  shapes.emplace_back(delta.values.classifier.bias.size(), 1);

  char buf[32];
  for (std::size_t t = 0; t < views.size(); ++t) {
    os << views[t].path << ' ' << shapes[t].first << ' ' << shapes[t].second << '\n';
    for (Index i = 0; i < views[t].values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", views[t].values(i));
      if (i > 0) os << ' ';
      os << buf;
    }
    os << '\n';
  }
}

ModelDelta read_delta(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kMagic) bad("missing " + std::string(kMagic) + " header");
  ModelDelta delta;
  std::string key;
  std::size_t count = 0;
  if (!(is >> key >> delta.sample_count) || key != "sample_count") bad("missing sample_count");
  if (!(is >> key >> count) || key != "tensors") bad("missing tensor count");

  bool have_classifier_weight = false, have_classifier_bias = false;
  for (std::size_t t = 0; t < count; ++t) {
    std::string path;
    Index rows = 0, cols = 0;
    if (!(is >> path >> rows >> cols) || rows < 0 || cols < 0) bad("bad tensor header");
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i)
      if (!(is >> m.data()[i])) bad("short tensor " + path);

    if (path == "classifier.weight") {
      delta.values.classifier.weight = std::move(m);
      have_classifier_weight = true;
    } else if (path == "classifier.bias") {
      delta.values.classifier.bias = Eigen::Map<const Vector>(m.data(), m.size());
      have_classifier_bias = true;
    } else {
      unsigned layer = 0;
      char kind[16] = {0};
      if (std::sscanf(path.c_str(), "extractor.%u.%15s", &layer, kind) != 2) bad("unknown tensor " + path);
      if (layer >= delta.values.extractor.size()) delta.values.extractor.resize(layer + 1);
      if (std::string(kind) == "weight")
        delta.values.extractor[layer].weight = std::move(m);
      else if (std::string(kind) == "bias")
        delta.values.extractor[layer].bias = Eigen::Map<const Vector>(m.data(), m.size());
      else
        bad("unknown tensor " + path);
    }
  }
  if (!have_classifier_weight || !have_classifier_bias) bad("classifier tensors missing");
  check_chain(delta.values);
  return delta;
}

}  // namespace fednpr
