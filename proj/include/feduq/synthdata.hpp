#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "feduq/tensor.hpp"

namespace feduq::synth {

// Synthetic stand-in for pretrained image/text encoders: paired unit-norm
// features driven by a shared latent, with input-dependent cross-modal noise
// whose scale is recorded per sample.
struct GeneratorSpec {
    std::size_t d = 32;        // feature dimension
    std::size_t m = 16;        // latent dimension
    std::size_t n_labels = 14;
    math::Tensor A;            // [d x m] image mixing
    math::Tensor B;            // [d x m] text mixing
    math::Tensor W_y;          // [n_labels x m] label logits
    std::vector<double> w_diff;  // unit vector defining sample difficulty
    double s_min = 0.1;
    double s_max = 1.0;
    std::uint64_t seed = 0;

    // Seeds A, B, W_y. The difficulty functional is aligned with the first
    // label row, so label skew induces difficulty (and noise) skew.
    static GeneratorSpec make(std::size_t d, std::size_t m, std::size_t n_labels,
                              double s_min, double s_max, std::uint64_t seed);
};

struct Sample {
    std::vector<double> z_img;                 // unit norm
    std::optional<std::vector<double>> z_txt;  // unit norm when present
    std::vector<std::uint8_t> labels;
    // Generation-time ground truth. Metrics and test oracles may read these;
    // model and federation code must not.
    double true_sigma = 0.0;
    double difficulty = 0.0;
};

enum class Modality { Multimodal, Unimodal };

struct ClientDataset {
    int client_id = 0;
    Modality modality = Modality::Multimodal;
    std::vector<Sample> samples;
    std::size_t n() const { return samples.size(); }
};

std::vector<Sample> generate(const GeneratorSpec& spec, std::size_t n);

// Re-derives the latent vector u behind sample `index` (diagnostics/oracles).
std::vector<double> latent(const GeneratorSpec& spec, std::size_t index);

std::vector<ClientDataset> dirichlet_partition(const std::vector<Sample>& samples, std::size_t K,
                                               double alpha_dir, std::uint64_t seed);

// Tags the first `ratio_multimodal` clients (in shuffled order) multimodal and
// strips z_txt from the rest. `unimodal_shift` optionally displaces unimodal
// clients' image features along a seeded direction to mimic a source-domain
// gap; 0 disables it.
void assign_modalities(std::vector<ClientDataset>& datasets, std::size_t ratio_unimodal,
                       std::size_t ratio_multimodal, std::uint64_t seed,
                       double unimodal_shift = 0.0);

void export_jsonl(const std::vector<ClientDataset>& datasets, const std::string& path);
std::vector<ClientDataset> import_jsonl(const std::string& path);

double sigmoid(double x);

}  // namespace feduq::synth
