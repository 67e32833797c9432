#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stgncde/solver.hpp"
#include "stgncde/spline.hpp"
#include "stgncde/tensor.hpp"

namespace stgncde {

enum class ModelVariant { full, temporal_only, spatial_only };

ModelVariant parse_variant(const std::string& name);
std::string variant_name(ModelVariant v);

struct ModelConfig {
    int num_nodes = 0;    // |V|
    int input_dim = 1;    // observed channels per node
    int hidden_dim = 64;  // temporal state width
    int state_dim = 64;   // spatial state width
    int embed_dim = 2;    // node embedding width
    int k_layers = 1;     // K
    int horizon = 12;     // S
    int output_dim = 1;   // M
    ModelVariant variant = ModelVariant::full;
    // Append t as an extra control channel (the usual NCDE augmentation; the
    // path derivative then carries a constant 1 alongside dX/dt).
    bool time_channel = false;

    int readout_dim() const { return variant == ModelVariant::temporal_only ? hidden_dim : state_dim; }
    int control_dim() const { return input_dim + (time_channel ? 1 : 0); }
    void validate() const;
};

/// One shared-across-nodes fully connected layer: weight is in x out, applied
/// to each row.
struct Fc {
    Tensor w, b;
};

Tensor affine(const Tensor& x, const Fc& fc);

/// All trainable tensors. Which members are populated depends on the variant;
/// named() reports the populated ones in a fixed order that also defines the
/// checkpoint and optimizer layout.
struct ModelParams {
    std::vector<Fc> f_hidden;  // K+1 relu layers, hidden -> hidden
    Fc f_out;                  // hidden -> hidden * input_dim, tanh outside
    Fc g_in;                   // state -> state
    Tensor w_spatial;          // state x state
    Fc g_out;                  // state -> state * hidden (full) or state * input_dim (spatial-only)
    Tensor embed;              // |V| x C
    Fc h0;                     // input_dim -> hidden
    Fc z0;                     // hidden -> state
    Fc out;                    // readout -> horizon * output_dim

    std::vector<std::pair<std::string, Tensor*>> named();
    std::vector<std::pair<std::string, const Tensor*>> named() const;
    ModelParams clone() const;
    void set_requires_grad();
};

/// Both hidden trajectories of the augmented system. Variants leave the
/// unused half undefined.
struct AugmentedState {
    Tensor h;
    Tensor z;
};

// CDE function f: row-local relu FC stack, tanh head emitting hidden*input_dim
// per node (read as a hidden x input_dim matrix against dX/dt).
Tensor temporal_cde_func(const Tensor& h, const ModelParams& params);

/// I + row_softmax(relu(E E^T)).
Tensor normalized_adaptive_adjacency(const Tensor& embed);

// CDE function g: row-local relu FC, one graph-mixing step through the
// adjacency and w_spatial, tanh head. `adj` is normally the hoisted
// normalized_adaptive_adjacency(embed) so one recording per tape serves every
// solver stage.
Tensor spatial_cde_func(const Tensor& z, const ModelParams& params, const Tensor& adj);

AugmentedState initial_values(const Tensor& x0, const ModelParams& params, ModelVariant variant);

/// The augmented vector field at time t for a single window. t must lie in
/// [0, window_len - 1].
AugmentedState vector_field(double t, const AugmentedState& state, const ControlPath& path,
                            const ModelParams& params, const ModelConfig& cfg);

Tensor output_layer(const Tensor& z_final, const ModelParams& params);

class Model {
  public:
    Model(ModelConfig cfg, std::uint64_t seed);
    Model(ModelConfig cfg, ModelParams params);

    const ModelConfig& config() const { return cfg_; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }

    /// Predictions for a batch of windows, stacked on the node axis:
    /// [(num_windows * |V|) x (horizon * output_dim)]. All windows must share
    /// the window length. Runs on the active tape if one is set.
    Tensor forward(std::span<const ControlPath* const> paths, const SolverConfig& solver) const;
    Tensor forward(const ControlPath& path, const SolverConfig& solver) const;

  private:
    ModelConfig cfg_;
    ModelParams params_;
};

}  // namespace stgncde
