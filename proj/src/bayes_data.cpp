#include "fcm/bayes_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "fcm/csv.hpp"
#include "fcm/error.hpp"

#ifndef FCM_DEFAULT_NETWORK_DIR
#define FCM_DEFAULT_NETWORK_DIR "data/networks"
#endif

namespace fcm::data {

using nlohmann::json;

BayesNet::BayesNet(std::string name, std::vector<BayesNode> nodes, std::string task)
    : name_(std::move(name)), task_(std::move(task)), nodes_(std::move(nodes)) {
  for (const auto& node : nodes_) {
    if (dag_.HasNode(node.name)) throw InputError("duplicate node '" + node.name + "'");
    if (node.cardinality < 2) {
      throw InputError("node '" + node.name + "' needs cardinality >= 2");
    }
    dag_.AddNode(node.name);
  }
  if (!dag_.HasNode(task_)) throw InputError("task node '" + task_ + "' not in network");
  for (const auto& node : nodes_) {
    std::vector<int> parents;
    std::size_t rows = 1;
    for (const auto& p : node.parents) {
      const int pi = dag_.Index(p);
      parents.push_back(pi);
      dag_.AddEdge(pi, dag_.Index(node.name));
      rows *= static_cast<std::size_t>(nodes_[static_cast<std::size_t>(pi)].cardinality);
    }
    const auto card = static_cast<std::size_t>(node.cardinality);
    if (node.cpt.size() != rows * card) {
      throw InputError("node '" + node.name + "': CPT has " + std::to_string(node.cpt.size()) +
                       " entries, expected " + std::to_string(rows * card));
    }
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < card; ++c) {
        const double p = node.cpt[r * card + c];
        if (p < 0.0) throw InputError("node '" + node.name + "': negative probability");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9) {
        throw InputError("node '" + node.name + "': CPT row " + std::to_string(r) +
                         " does not sum to 1");
      }
    }
    parent_index_.push_back(std::move(parents));
  }
  if (!dag_.IsAcyclic()) throw InputError("network '" + name_ + "' is cyclic");
}

std::span<const double> BayesNet::CptRow(int node, std::span<const int> assignment) const {
  const auto& n = nodes_[static_cast<std::size_t>(node)];
  std::size_t row = 0;
  for (int p : parent_index_[static_cast<std::size_t>(node)]) {
    row = row * static_cast<std::size_t>(cardinality(p)) +
          static_cast<std::size_t>(assignment[static_cast<std::size_t>(p)]);
  }
  const auto card = static_cast<std::size_t>(n.cardinality);
  return {n.cpt.data() + row * card, card};
}

BayesNet LoadNetwork(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open network file " + file.string());
  try {
    const json doc = json::parse(in);
    std::vector<BayesNode> nodes;
    for (const auto& jn : doc.at("nodes")) {
      BayesNode node;
      node.name = jn.at("name").get<std::string>();
      node.cardinality = jn.at("cardinality").get<int>();
      if (jn.contains("states")) node.states = jn.at("states").get<std::vector<std::string>>();
      node.parents = jn.at("parents").get<std::vector<std::string>>();
      node.cpt = jn.at("cpt").get<std::vector<double>>();
      nodes.push_back(std::move(node));
    }
    return BayesNet(doc.value("name", file.stem().string()), std::move(nodes),
                    doc.at("task").get<std::string>());
  } catch (const json::exception& e) {
    throw DataError("malformed network file " + file.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw DataError("invalid network file " + file.string() + ": " + e.what());
  }
}

std::filesystem::path NetworkDirectory() {
  if (const char* env = std::getenv("FCM_NETWORK_DIR"); env != nullptr && *env) return env;
  return FCM_DEFAULT_NETWORK_DIR;
}

BayesNet LoadReferenceNetwork(const std::string& name) {
  return LoadNetwork(NetworkDirectory() / (name + ".json"));
}

std::map<std::string, BayesNet> ReferenceNetworks() {
  std::map<std::string, BayesNet> out;
  for (const auto& name : ReferenceNetworkNames()) out.emplace(name, LoadReferenceNetwork(name));
  return out;
}

NetworkDefaults DefaultsFor(const std::string& network) {
  if (network == "asia") return {15000, 32};
  if (network == "sachs") return {15000, 32};
  if (network == "alarm") return {10000, 64};
  if (network == "insurance") return {20000, 64};
  if (network == "hailfinder") return {20000, 64};
  return {10000, 32};
}

SampleTable AncestralSample(const BayesNet& net, std::size_t n, Rng& rng) {
  if (n < 1) throw InputError("AncestralSample: n must be at least 1");
  SampleTable table;
  const auto m = net.nodes().size();
  for (const auto& node : net.nodes()) {
    table.columns.push_back(node.name);
    table.cardinality.push_back(node.cardinality);
  }
  table.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  const std::vector<int> order = net.dag().TopologicalOrder();
  std::vector<int> assignment(m, 0);
  for (std::size_t r = 0; r < n; ++r) {
    for (int node : order) {
      const auto row = net.CptRow(node, assignment);
      const double u = rng.Uniform();
      double acc = 0.0;
      int value = static_cast<int>(row.size()) - 1;
      for (std::size_t c = 0; c < row.size(); ++c) {
        acc += row[c];
        if (u < acc) {
          value = static_cast<int>(c);
          break;
        }
      }
      // Never land on a zero-probability tail state through rounding.
      while (value > 0 && row[static_cast<std::size_t>(value)] == 0.0) --value;
      assignment[static_cast<std::size_t>(node)] = value;
      table.values(static_cast<Eigen::Index>(r), node) = value;
    }
  }
  return table;
}

int EncodedDataset::ConceptIndex(const std::string& name) const {
  for (std::size_t i = 0; i < concept_names.size(); ++i) {
    if (concept_names[i] == name) return static_cast<int>(i);
  }
  throw InputError("unknown concept '" + name + "'");
}

Split MakeSplit(std::size_t n, Rng& rng) {
  const auto perm = rng.Permutation(n);
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  Split s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

namespace {

nn::Matrix Gather(const nn::Matrix& m, std::span<const std::size_t> rows) {
  nn::Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

// Per-column mean and std over the given rows; zero std maps to 1.
void StandardizeColumns(nn::Matrix& m, std::span<const std::size_t> rows) {
  const nn::Matrix sub = Gather(m, rows);
  const auto n = static_cast<double>(sub.rows());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const double mean = sub.col(c).sum() / n;
    const double var = (sub.col(c).array() - mean).square().sum() / n;
    const double sd = var > 0.0 ? std::sqrt(var) : 1.0;
    m.col(c) = (m.col(c).array() - mean) / sd;
  }
}

// Two encoder layers (width -> hidden -> latent) and two decoder layers
// (latent -> hidden -> width), trained on MSE.
nn::Matrix TrainAutoencoder(const nn::Matrix& onehot, std::span<const std::size_t> train,
                            const SynthesisOptions& options, Rng& rng) {
  const int width = static_cast<int>(onehot.cols());
  const int latent = options.latent_dim;
  const int hidden = std::max(
      1, static_cast<int>(std::lround(std::sqrt(static_cast<double>(width) * latent))));
  using nn::Activation;
  const std::vector<int> enc_dims{width, hidden, latent};
  const std::vector<int> dec_dims{latent, hidden, width};
  const std::vector<Activation> acts{Activation::kLeakyRelu, Activation::kIdentity};
  Rng init = rng.Fork("ae-init");
  nn::DenseNet encoder = nn::DenseNet::Create(enc_dims, acts, init);
  nn::DenseNet decoder = nn::DenseNet::Create(dec_dims, acts, init);

  const std::size_t n_enc = encoder.param_count();
  const std::size_t n_all = n_enc + decoder.param_count();
  nn::Vector params(static_cast<Eigen::Index>(n_all));
  encoder.CopyParams({params.data(), n_enc});
  decoder.CopyParams({params.data() + n_enc, n_all - n_enc});
  nn::AdamState adam = nn::AdamState::Zeros(n_all, options.lr);

  Rng order = rng.Fork("ae-order");
  std::vector<std::size_t> rows(train.begin(), train.end());
  const auto bs = static_cast<std::size_t>(std::max(1, options.batch_size));
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    order.Shuffle(rows);
    for (std::size_t start = 0; start < rows.size(); start += bs) {
      const std::size_t end = std::min(rows.size(), start + bs);
      const nn::Matrix x = Gather(onehot, std::span(rows).subspan(start, end - start));
      nn::ForwardCache enc_cache, dec_cache;
      const nn::Matrix z = encoder.Forward(x, &enc_cache);
      const nn::Matrix recon = decoder.Forward(z, &dec_cache);
      const nn::Matrix dout = 2.0 * (recon - x) / static_cast<double>(x.size());
      nn::Vector grad = nn::Vector::Zero(static_cast<Eigen::Index>(n_all));
      const nn::Matrix dz =
          decoder.Backward(dec_cache, dout, {grad.data() + n_enc, n_all - n_enc});
      encoder.Backward(enc_cache, dz, {grad.data(), n_enc});
      nn::AdamStep(adam, {params.data(), n_all}, {grad.data(), n_all});
      encoder.LoadParams({params.data(), n_enc});
      decoder.LoadParams({params.data() + n_enc, n_all - n_enc});
    }
  }
  return encoder.Forward(onehot);
}

}  // namespace

EncodedDataset SynthesizeInputs(const SampleTable& samples, const std::string& task,
                                const SynthesisOptions& options, Rng& rng) {
  if (options.latent_dim < 1) throw InputError("latent_dim must be at least 1");
  if (options.noise_mix < 0.0 || options.noise_mix > 1.0) {
    throw InputError("noise_mix must lie in [0, 1]");
  }
  int task_col = -1;
  EncodedDataset out;
  std::vector<int> concept_cols;
  for (std::size_t c = 0; c < samples.columns.size(); ++c) {
    if (samples.columns[c] == task) {
      task_col = static_cast<int>(c);
      continue;
    }
    concept_cols.push_back(static_cast<int>(c));
    out.concept_names.push_back(samples.columns[c]);
    out.concept_cardinality.push_back(samples.cardinality[c]);
  }
  if (task_col < 0) throw InputError("task '" + task + "' is not a sample column");
  const auto n = static_cast<std::size_t>(samples.values.rows());
  out.task = task;
  out.task_cardinality = samples.cardinality[static_cast<std::size_t>(task_col)];
  out.concepts.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(concept_cols.size()));
  for (std::size_t j = 0; j < concept_cols.size(); ++j) {
    out.concepts.col(static_cast<Eigen::Index>(j)) = samples.values.col(concept_cols[j]);
  }
  out.task_labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    out.task_labels[r] = samples.values(static_cast<Eigen::Index>(r), task_col);
  }

  Rng split_rng = rng.Fork("split");
  out.split = MakeSplit(n, split_rng);

  // One-hot of the concept columns only; the task never enters the inputs.
  int width = 0;
  for (int c : out.concept_cardinality) width += c;
  nn::Matrix onehot = nn::Matrix::Zero(static_cast<Eigen::Index>(n), width);
  int offset = 0;
  for (std::size_t j = 0; j < concept_cols.size(); ++j) {
    for (std::size_t r = 0; r < n; ++r) {
      onehot(static_cast<Eigen::Index>(r),
             offset + out.concepts(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j))) = 1.0;
    }
    offset += out.concept_cardinality[j];
  }

  Rng ae_rng = rng.Fork("autoencoder");
  nn::Matrix encoded = TrainAutoencoder(onehot, out.split.train, options, ae_rng);

  Rng noise = rng.Fork("noise");
  for (Eigen::Index c = 0; c < encoded.cols(); ++c) {
    for (Eigen::Index r = 0; r < encoded.rows(); ++r) {
      encoded(r, c) = (1.0 - options.noise_mix) * encoded(r, c) +
                      options.noise_mix * noise.Normal();
    }
  }
  StandardizeColumns(encoded, out.split.train);
  out.inputs = std::move(encoded);
  return out;
}

EncodedDataset GenerateDataset(const BayesNet& net, std::size_t n,
                               const SynthesisOptions& options, Rng& rng) {
  Rng sample_rng = rng.Fork("ancestral");
  const SampleTable table = AncestralSample(net, n, sample_rng);
  Rng synth_rng = rng.Fork("synthesis");
  EncodedDataset data = SynthesizeInputs(table, net.task(), options, synth_rng);
  data.network = net.name();
  return data;
}

void SaveDataset(const EncodedDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t n = data.rows();
  csv::Table inputs;
  for (Eigen::Index c = 0; c < data.inputs.cols(); ++c) inputs.header.push_back("x" + std::to_string(c));
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<std::string> row;
    for (Eigen::Index c = 0; c < data.inputs.cols(); ++c) {
      row.push_back(csv::FormatDouble(data.inputs(static_cast<Eigen::Index>(r), c)));
    }
    inputs.rows.push_back(std::move(row));
  }
  csv::Write(dir / "inputs.csv", inputs);

  csv::Table concepts;
  concepts.header = data.concept_names;
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<std::string> row;
    for (Eigen::Index c = 0; c < data.concepts.cols(); ++c) {
      row.push_back(std::to_string(data.concepts(static_cast<Eigen::Index>(r), c)));
    }
    concepts.rows.push_back(std::move(row));
  }
  csv::Write(dir / "concepts.csv", concepts);

  csv::Table task;
  task.header = {data.task};
  for (int y : data.task_labels) task.rows.push_back({std::to_string(y)});
  csv::Write(dir / "task.csv", task);

  json split = {{"train", data.split.train}, {"val", data.split.val}, {"test", data.split.test}};
  std::ofstream(dir / "split.json") << split.dump() << '\n';
  json meta = {{"network", data.network},
               {"task", data.task},
               {"task_cardinality", data.task_cardinality},
               {"concepts", data.concept_names},
               {"concept_cardinality", data.concept_cardinality},
               {"rows", n},
               {"latent_dim", data.inputs.cols()}};
  std::ofstream(dir / "meta.json") << meta.dump(1) << '\n';
}

EncodedDataset LoadDataset(const std::filesystem::path& dir) {
  EncodedDataset data;
  try {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw DataError("missing " + (dir / "meta.json").string());
    const json meta = json::parse(meta_in);
    data.network = meta.at("network").get<std::string>();
    data.task = meta.at("task").get<std::string>();
    data.task_cardinality = meta.at("task_cardinality").get<int>();
    data.concept_names = meta.at("concepts").get<std::vector<std::string>>();
    data.concept_cardinality = meta.at("concept_cardinality").get<std::vector<int>>();
    const auto n = meta.at("rows").get<std::size_t>();

    const csv::Table inputs = csv::Read(dir / "inputs.csv");
    const csv::Table concepts = csv::Read(dir / "concepts.csv");
    const csv::Table task = csv::Read(dir / "task.csv");
    if (inputs.rows.size() != n || concepts.rows.size() != n || task.rows.size() != n) {
      throw DataError(dir.string() + ": row counts disagree with meta.json");
    }
    data.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(inputs.header.size()));
    data.concepts.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(data.concept_names.size()));
    data.task_labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < inputs.header.size(); ++c) {
        data.inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
            std::stod(inputs.rows[r][c]);
      }
      for (std::size_t c = 0; c < data.concept_names.size(); ++c) {
        data.concepts(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
            std::stoi(concepts.rows[r].at(c));
      }
      data.task_labels[r] = std::stoi(task.rows[r][0]);
    }
    std::ifstream split_in(dir / "split.json");
    if (!split_in) throw DataError("missing " + (dir / "split.json").string());
    const json split = json::parse(split_in);
    data.split.train = split.at("train").get<std::vector<std::size_t>>();
    data.split.val = split.at("val").get<std::vector<std::size_t>>();
    data.split.test = split.at("test").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw DataError("malformed dataset in " + dir.string() + ": " + e.what());
  } catch (const std::logic_error& e) {
    throw DataError("malformed dataset in " + dir.string() + ": " + e.what());
  }
  return data;
}

}  // namespace fcm::data
