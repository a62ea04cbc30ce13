#pragma once

#include "longtail/common.hpp"

#include <initializer_list>
#include <vector>

namespace longtail {

enum class Part : unsigned char { train_support = 0, train_query = 1, test = 2 };

// One scenario's samples. Sequences hold event ids with 0 = padding; the mask
// is 1 exactly where the event id is nonzero.
struct ScenarioDataset {
  int scenario_id = 0;
  Matrix profiles;       // M x profile_dim
  IntMatrix sequences;   // M x max_seq_len
  Matrix seq_mask;       // M x max_seq_len
  Vector labels;         // M, values in {0,1}
  std::vector<Part> partition;
  int vocab_size = 0;

  int rows() const { return static_cast<int>(profiles.rows()); }
  int profile_dim() const { return static_cast<int>(profiles.cols()); }
  int max_seq_len() const { return static_cast<int>(sequences.cols()); }

  std::vector<int> rows_with(std::initializer_list<Part> parts) const;
  void validate() const;
};

struct SampleRef {
  const ScenarioDataset* ds = nullptr;
  int row = 0;
};

using DataView = std::vector<SampleRef>;

DataView view_of(const ScenarioDataset& ds, std::initializer_list<Part> parts);
inline DataView train_view(const ScenarioDataset& ds) {
  return view_of(ds, {Part::train_support, Part::train_query});
}
inline DataView support_view(const ScenarioDataset& ds) {
  return view_of(ds, {Part::train_support});
}
inline DataView query_view(const ScenarioDataset& ds) {
  return view_of(ds, {Part::train_query});
}
inline DataView test_view(const ScenarioDataset& ds) { return view_of(ds, {Part::test}); }

void append(DataView& dst, const DataView& src);

// Dense batch in the [B*T x ...] layout used by the graph ops.
struct Batch {
  Matrix profiles;          // B x P
  std::vector<int> events;  // B*T event ids
  Vector mask;              // B*T
  Vector labels;            // B
  int batch_size = 0;
  int seq_len = 0;
};

Batch make_batch(const DataView& data, const std::vector<int>& indices);
Batch make_batch(const DataView& data);  // all rows

Vector labels_of(const DataView& data);

}  // namespace longtail
