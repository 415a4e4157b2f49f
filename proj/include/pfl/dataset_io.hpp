#pragma once

// JSON-lines dataset files. The first line may be a header object
// {"dataset": {"task", "feature_dim", "num_classes"}}; every other line is a
// client object {client_id, examples: [{x, y, t?}], role?, tags?}.

#include <filesystem>
#include <iosfwd>

#include "pfl/types.hpp"

namespace pfl {

void write_dataset(const FederatedDataset& ds, std::ostream& out);
void write_dataset(const FederatedDataset& ds, const std::filesystem::path& path);

/// Without a header line the task defaults to `default_task`, feature_dim is
/// taken from the first example, and num_classes from the largest label.
FederatedDataset read_dataset(std::istream& in, TaskKind default_task = TaskKind::classification);
FederatedDataset read_dataset(const std::filesystem::path& path,
                              TaskKind default_task = TaskKind::classification);

}  // namespace pfl
