#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "fcm/bayes_data.hpp"
#include "fcm/client_partition.hpp"
#include "fcm/federation.hpp"

namespace fcm {

// Experiment configuration. Serialized as one JSON document; the effective
// (merged) config is written next to every run.
struct Config {
  std::string dataset = "asia";
  std::string data_dir;       // pre-generated dataset; empty means generate from the fields below
  std::string manifest;       // pre-built partition; empty means partition from the fields below
  int n_samples = 0;          // 0: network default
  int latent_dim = 0;         // synthetic input width; 0: network default
  double noise_mix = 0.5;
  int synthesis_epochs = 50;

  int n_clients = 20;
  int participants_per_round = 10;
  int join_round = 10;
  int rounds = 200;
  int local_epochs = 2;
  int batch_size = 64;
  int patience = 10;
  double gamma = 0.8;
  double lr = 1e-3;
  double intervention_prob = 0.25;
  bool freeze_unsupervised = true;

  int encoder_hidden = 64;
  int z_dim = 32;
  int hidden_dim = 32;
  int embedding_dim = 16;

  double task_drop_rate = 0.3;
  double late_concept_fraction = 0.4;
  int extra_nodes = 2;

  std::string regime = "fcm";
  std::string model_kind = "cbm";

  struct Dp {
    bool enabled = false;
    double clip = 1.0;
    double sigma = 1.0;
  } dp;

  struct Graph {
    std::string memory = "cumulative";
    double perturb_p = 0.3;
    double perturb_rate = 0.3;
  } graph;

  std::uint64_t seed = 0;
  std::int64_t data_seed = -1;       // -1: follow seed
  std::int64_t partition_seed = -1;  // -1: follow seed
  bool record_wall_clock = false;

  void Validate() const;  // throws InputError

  std::uint64_t DataSeed() const;
  std::uint64_t PartitionSeed() const;
  int SampleCount() const;
  int LatentDim() const;

  data::SynthesisOptions Synthesis() const;
  partition::FederationOptions Federation() const;
  fed::TrainOptions Training() const;
};

nlohmann::ordered_json ToJson(const Config& config);
// Missing keys keep their defaults; unknown keys are rejected (DataError).
Config ConfigFromJson(const nlohmann::json& doc, Config base = {});
Config LoadConfig(const std::filesystem::path& file);
void SaveConfig(const Config& config, const std::filesystem::path& file);

}  // namespace fcm
