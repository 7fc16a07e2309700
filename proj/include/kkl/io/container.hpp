#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kkl/diffcore/tensor.hpp"
#include "kkl/observer/observer.hpp"
#include "kkl/training/training.hpp"

namespace kkl::io {

using Json = nlohmann::ordered_json;

inline constexpr char kCheckpointMagic[] = "KKLCKPT1";
inline constexpr char kDatasetMagic[] = "KKLDSET1";

/// Binary tensor container: 8-byte magic, u64 little-endian header length,
/// JSON manifest, then little-endian f64 tensor data in manifest order.
struct Container {
  Json manifest;  // includes the "tensors" table after writing/reading
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

/// Adds the tensor table to `c.manifest` and returns the file bytes.
std::string encode_container(const char* magic, Container& c);
/// Parses bytes; throws FormatError naming the byte offset of the first inconsistency.
Container decode_container(const char* magic, const std::string& bytes);

void write_file(const std::string& path, const std::string& bytes);
/// Throws MissingPrerequisite when the file does not exist.
std::string read_file(const std::string& path);

void save_container(const std::string& path, const char* magic, Container& c);
Container load_container(const std::string& path, const char* magic);

Json net_to_json(const NetConfig& net);
NetConfig net_from_json(const Json& j);

/// Checkpoint = bundle weights + observer matrices + manifest with the run config.
Container checkpoint_of(const ModelBundle& bundle, const Json& run_config, const Json& metrics);
ModelBundle bundle_of(const Container& ckpt);

Container dataset_container(const AutonomousDataset& d, const Json& run_config);
Container dataset_container(const ForcedDataset& d, const Json& run_config);
AutonomousDataset autonomous_of(const Container& c);
ForcedDataset forced_of(const Container& c);

}  // namespace kkl::io
