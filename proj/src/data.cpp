#include "longtail/data.hpp"

#include <stdexcept>

namespace longtail {

std::vector<int> ScenarioDataset::rows_with(std::initializer_list<Part> parts) const {
  std::vector<int> out;
  for (int r = 0; r < rows(); ++r)
    for (Part p : parts)
      if (partition[static_cast<std::size_t>(r)] == p) {
        out.push_back(r);
        break;
      }
  return out;
}

void ScenarioDataset::validate() const {
  const int m = rows();
  if (m == 0) throw std::invalid_argument("ScenarioDataset: empty");
  if (sequences.rows() != m || seq_mask.rows() != m || labels.size() != m ||
      partition.size() != static_cast<std::size_t>(m))
    throw std::invalid_argument("ScenarioDataset: row counts disagree");
  if (sequences.cols() != seq_mask.cols())
    throw std::invalid_argument("ScenarioDataset: sequence/mask width mismatch");
  for (int r = 0; r < m; ++r) {
    double valid = 0.0;
    for (int t = 0; t < max_seq_len(); ++t) {
      const bool nonzero = sequences(r, t) != 0;
      if (seq_mask(r, t) != (nonzero ? 1.0 : 0.0))
        throw std::invalid_argument("ScenarioDataset: mask must be 1 exactly where event != 0");
      if (sequences(r, t) < 0 || sequences(r, t) > vocab_size)
        throw std::invalid_argument("ScenarioDataset: event id out of vocabulary");
      valid += seq_mask(r, t);
    }
    if (valid < 1.0)
      throw std::invalid_argument("ScenarioDataset: row " + std::to_string(r) +
                                  " has no unmasked positions");
    if (labels(r) != 0.0 && labels(r) != 1.0)
      throw std::invalid_argument("ScenarioDataset: labels must be 0/1");
  }
  // both classes in train and test
  for (auto parts : {std::initializer_list<Part>{Part::train_support, Part::train_query},
                     std::initializer_list<Part>{Part::test}}) {
    bool pos = false, neg = false;
    for (int r : rows_with(parts)) (labels(r) == 1.0 ? pos : neg) = true;
    if (!pos || !neg)
      throw std::invalid_argument("ScenarioDataset: a partition is missing a class");
  }
}

DataView view_of(const ScenarioDataset& ds, std::initializer_list<Part> parts) {
  DataView v;
  for (int r : ds.rows_with(parts)) v.push_back({&ds, r});
  return v;
}

void append(DataView& dst, const DataView& src) { dst.insert(dst.end(), src.begin(), src.end()); }

Batch make_batch(const DataView& data, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index set");
  const ScenarioDataset& first = *data[static_cast<std::size_t>(indices[0])].ds;
  const int p = first.profile_dim();
  const int t = first.max_seq_len();
  const int b = static_cast<int>(indices.size());
  Batch out;
  out.batch_size = b;
  out.seq_len = t;
  out.profiles.resize(b, p);
  out.events.resize(static_cast<std::size_t>(b) * t);
  out.mask.resize(static_cast<Eigen::Index>(b) * t);
  out.labels.resize(b);
  for (int i = 0; i < b; ++i) {
    const SampleRef& ref = data[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
    const ScenarioDataset& ds = *ref.ds;
    if (ds.profile_dim() != p || ds.max_seq_len() != t)
      throw std::invalid_argument("make_batch: mixed shapes across scenarios");
    out.profiles.row(i) = ds.profiles.row(ref.row);
    out.labels(i) = ds.labels(ref.row);
    for (int k = 0; k < t; ++k) {
      out.events[static_cast<std::size_t>(i) * t + k] = ds.sequences(ref.row, k);
      out.mask(static_cast<Eigen::Index>(i) * t + k) = ds.seq_mask(ref.row, k);
    }
  }
  return out;
}

Batch make_batch(const DataView& data) {
  std::vector<int> idx(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) idx[i] = static_cast<int>(i);
  return make_batch(data, idx);
}

Vector labels_of(const DataView& data) {
  Vector y(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i)
    y(static_cast<Eigen::Index>(i)) = data[i].ds->labels(data[i].row);
  return y;
}

}  // namespace longtail
