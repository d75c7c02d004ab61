#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "udah/autodiff.hpp"
#include "udah/graph.hpp"
#include "udah/tensor.hpp"

namespace udah {

struct ModelConfig {
  std::size_t input_dim = 0;
  // Output width of each encoder layer; the last entry is the embedding size.
  std::vector<std::size_t> encoder_widths{1024, 512, 256};
  std::vector<std::size_t> discriminator_widths{256, 256};
  std::size_t code_length = 128;
  std::size_t options_per_block = 2;
  std::size_t num_classes = 0;
  double dropout = 0.1;

  std::size_t embedding_dim() const { return encoder_widths.back(); }
  void validate() const;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

// affine -> dropout -> layer norm -> relu
struct MlpBlock {
  Linear affine;
  Tensor ln_gain;
  Tensor ln_bias;
};

struct Encoder {
  std::vector<MlpBlock> layers;
  double dropout = 0.0;
};

struct HashHead {
  Linear classifier;  // [embedding, code_length * options]
  std::size_t code_length = 0;
  std::size_t options = 2;
};

struct Discriminator {
  std::vector<MlpBlock> hidden;
  Linear classifier;  // [hidden, K]
  double dropout = 0.0;
};

/// Per-domain EMA table of class centers in embedding space.
struct CenterTable {
  Tensor centers;          // [K, embedding]
  std::vector<bool> seen;  // classes observed at least once

  static CenterTable empty(std::size_t num_classes, std::size_t dim);
};

struct ModelParams {
  ModelConfig config;
  Encoder encoder;
  HashHead head;
  Discriminator source_disc;
  Discriminator target_disc;
  CenterTable source_centers;
  CenterTable target_centers;

  // Trainable tensors in a fixed order, with stable names.
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
};

// Glorot-uniform weights, zero biases, unit layer-norm gains.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

/// Binary code of length l. Bits are stored one per byte for clarity; the
/// Hamming index packs them into words.
class HashCode {
 public:
  HashCode() = default;
  explicit HashCode(std::vector<std::uint8_t> bits);
  std::size_t size() const { return bits_.size(); }
  std::uint8_t operator[](std::size_t i) const { return bits_[i]; }
  std::span<const std::uint8_t> bits() const { return bits_; }
  friend bool operator==(const HashCode&, const HashCode&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

// ---- forward passes -------------------------------------------------------

ad::Var encode(ad::Tape& tape, const Encoder& enc, ad::Var x, bool train, std::mt19937_64& rng);
ad::Var hash_logits(ad::Tape& tape, const HashHead& head, ad::Var z);
// Standard Gumbel(0,1) draws, -log(-log U), one per logit.
Tensor sample_gumbel(std::size_t rows, std::size_t cols, std::mt19937_64& rng);
// Block-wise softmax((logits + noise) / tau) over consecutive groups of `options`.
ad::Var relax_blocks(ad::Var logits, const Tensor& noise, double tau, std::size_t options);
ad::Var relax_hash(ad::Tape& tape, const HashHead& head, ad::Var z, const Tensor& noise, double tau);
ad::Var discriminate(ad::Tape& tape, const Discriminator& disc, ad::Var z, bool train, std::mt19937_64& rng);

// Noiseless block argmax of one logit row; ties go to the lowest index.
HashCode code_from_logits(std::span<const double> logits, std::size_t options);
HashCode emit_code(const HashHead& head, std::span<const double> embedding);

// Inference-mode embeddings (dropout off) for every node of g, in batches.
Tensor embed_graph(const ModelParams& params, const Graph& g, std::size_t batch_size = 512);
std::vector<HashCode> emit_codes(const ModelParams& params, const Graph& g);

// ---- checkpoints ----------------------------------------------------------
// Little-endian binary container:
//   "UDAHCKPT" | u32 version | u32 meta_len | meta (key=value lines)
//   | u32 count | count x (u32 name_len | name | u32 rank | u64 dims[rank] | f64 data[])
// Holds every trainable tensor plus both center tables; doubles are stored
// bit-exactly.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace udah
