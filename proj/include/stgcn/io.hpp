#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stgcn/datagen.hpp"
#include "stgcn/trainer.hpp"

namespace stgcn::io {

namespace fs = std::filesystem;

/// Writes via a temporary sibling file and rename.
void write_file_atomic(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

// Topology edge list: "n <count>" then one "i j w" line per edge.
std::string format_topology(const Topology& topology);
Topology parse_topology(const std::string& text);
void save_topology(const fs::path& path, const Topology& topology);
Topology load_topology(const fs::path& path);

// Dataset directory: manifest.json, samples.bin, topology.txt.
inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kSamplesName = "samples.bin";
inline constexpr const char* kTopologyName = "topology.txt";

std::string encode_samples(const std::vector<SvsSample>& samples);
std::vector<SvsSample> decode_samples(const std::string& bytes, std::size_t steps, std::size_t buses, std::size_t count);
void save_dataset(const fs::path& dir, const LabeledDataset& dataset);
LabeledDataset load_dataset(const fs::path& dir);

// Checkpoint container: "STGCNCKP", u32 format version, u64 header length,
// JSON header, then each tensor's values as little-endian f64 in header order.
std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const fs::path& path);

// Metrics: CSV "epoch,loss,train_acc,test_acc,seconds" and a JSON summary.
std::string metrics_csv(const Metrics& metrics);
std::vector<EpochMetrics> parse_metrics_csv(const std::string& text);
std::string metrics_json(const Metrics& metrics, const std::string& extra_json = "{}");

}  // namespace stgcn::io
