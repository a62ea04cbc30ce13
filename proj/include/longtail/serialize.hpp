#pragma once

// Persistence: model artifacts as a human-readable manifest plus one binary
// parameter blob with a named-array index, scenario datasets as a directory
// of flat arrays, meta state as artifact + metadata. Formats are documented
// in docs/formats.md; round trips are bit-exact.

#include "longtail/arch.hpp"
#include "longtail/data.hpp"
#include "longtail/meta.hpp"

#include <json.hpp>

#include <string>

namespace longtail {

// writes <prefix>.json and <prefix>.bin
void save_artifact(const ModelArtifact& m, const std::string& prefix);
ModelArtifact load_artifact(const std::string& prefix);

void save_scenario(const ScenarioDataset& ds, const std::string& dir);
ScenarioDataset load_scenario(const std::string& dir);

void save_meta_state(const MetaState& s, const std::string& dir);
MetaState load_meta_state(const std::string& dir);

nlohmann::json arch_to_json(const ModelArch& arch);
ModelArch arch_from_json(const nlohmann::json& j);

}  // namespace longtail
