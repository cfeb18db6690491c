#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <random>
#include <vector>

namespace optrisk {

struct DenseLayer {
    Eigen::MatrixXd weight;  // outputs x inputs
    Eigen::VectorXd bias;
    Eigen::MatrixXd mask;    // 1 trainable, 0 pruned
};

// Fully connected network with rectifier activations between hidden layers and
// a linear output. Batches are columns.
class Mlp {
public:
    Mlp() = default;
    // He-initialized weights, zero biases.
    Mlp(const std::vector<int>& sizes, std::mt19937_64& rng);

    int inputs() const { return sizes_.empty() ? 0 : sizes_.front(); }
    int outputs() const { return sizes_.empty() ? 0 : sizes_.back(); }
    const std::vector<int>& sizes() const { return sizes_; }
    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<DenseLayer>& layers() { return layers_; }

    // Inputs to every layer after activation; front() is the network input.
    struct Tape {
        std::vector<Eigen::MatrixXd> inputs;
    };

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Tape& tape) const;

    // Adds dL/dparameters to grad (flat parameter order) given dL/doutput.
    void backward(const Tape& tape, const Eigen::MatrixXd& grad_out, Eigen::Ref<Eigen::VectorXd> grad) const;

    // Flat order per layer: weight (column-major), then bias.
    std::size_t parameter_count() const;
    std::size_t weight_count() const;
    Eigen::VectorXd parameters() const;
    void set_parameters(const Eigen::Ref<const Eigen::VectorXd>& p);
    Eigen::VectorXd mask_vector() const;

    // Global magnitude pruning: masks and zeros ceil(fraction * weight_count)
    // weights of smallest magnitude. Biases are never pruned.
    void prune(double fraction);
    std::size_t pruned_count() const;

private:
    std::vector<int> sizes_;
    std::vector<DenseLayer> layers_;
};

class Adam {
public:
    Adam() = default;
    Adam(std::size_t size, double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);

    // Entries with mask 0 neither move nor accumulate moments.
    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, const Eigen::VectorXd& mask);
    void reset_masked(const Eigen::VectorXd& mask);

private:
    Eigen::VectorXd m_;
    Eigen::VectorXd v_;
    double lr_ = 1e-3;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long t_ = 0;
};

}  // namespace optrisk
