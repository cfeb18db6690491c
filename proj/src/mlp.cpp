#include "optrisk/mlp.hpp"

#include "optrisk/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace optrisk {

Mlp::Mlp(const std::vector<int>& sizes, std::mt19937_64& rng) : sizes_(sizes) {
    if (sizes.size() < 2) {
        throw DomainError("Mlp: need at least input and output sizes");
    }
    for (int s : sizes) {
        if (s <= 0) {
            throw DomainError("Mlp: layer sizes must be positive");
        }
    }
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        DenseLayer layer;
        const double scale = std::sqrt(2.0 / sizes[l]);
        std::normal_distribution<double> normal(0.0, scale);
        layer.weight.resize(sizes[l + 1], sizes[l]);
        for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
            for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
                layer.weight(i, j) = normal(rng);
            }
        }
        layer.bias = Eigen::VectorXd::Zero(sizes[l + 1]);
        layer.mask = Eigen::MatrixXd::Ones(sizes[l + 1], sizes[l]);
        layers_.push_back(std::move(layer));
    }
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
    Tape tape;
    return forward(x, tape);
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Tape& tape) const {
    if (x.rows() != inputs()) {
        throw DomainError("Mlp: input has " + std::to_string(x.rows()) + " rows, expected " + std::to_string(inputs()));
    }
    tape.inputs.clear();
    tape.inputs.push_back(x);
    Eigen::MatrixXd h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        h = (layers_[l].weight * h).colwise() + layers_[l].bias;
        if (l + 1 < layers_.size()) {
            h = h.cwiseMax(0.0);
            tape.inputs.push_back(h);
        }
    }
    return h;
}

void Mlp::backward(const Tape& tape, const Eigen::MatrixXd& grad_out, Eigen::Ref<Eigen::VectorXd> grad) const {
    std::vector<Eigen::Index> offsets(layers_.size());
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        offsets[l] = offset;
        offset += layers_[l].weight.size() + layers_[l].bias.size();
    }
    Eigen::MatrixXd delta = grad_out;
    for (std::size_t l = layers_.size(); l-- > 0;) {
        const auto& layer = layers_[l];
        const Eigen::MatrixXd& input = tape.inputs[l];
        Eigen::Map<Eigen::MatrixXd> gw(grad.data() + offsets[l], layer.weight.rows(), layer.weight.cols());
        gw.noalias() += delta * input.transpose();
        grad.segment(offsets[l] + layer.weight.size(), layer.bias.size()) += delta.rowwise().sum();
        if (l > 0) {
            Eigen::MatrixXd back = layer.weight.transpose() * delta;
            delta = (input.array() > 0.0).select(back, 0.0);
        }
    }
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_) {
        n += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
    }
    return n;
}

std::size_t Mlp::weight_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_) {
        n += static_cast<std::size_t>(layer.weight.size());
    }
    return n;
}

Eigen::VectorXd Mlp::parameters() const {
    Eigen::VectorXd p(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index offset = 0;
    for (const auto& layer : layers_) {
        p.segment(offset, layer.weight.size()) = layer.weight.reshaped();
        offset += layer.weight.size();
        p.segment(offset, layer.bias.size()) = layer.bias;
        offset += layer.bias.size();
    }
    return p;
}

void Mlp::set_parameters(const Eigen::Ref<const Eigen::VectorXd>& p) {
    if (static_cast<std::size_t>(p.size()) != parameter_count()) {
        throw DomainError("Mlp: parameter vector has the wrong length");
    }
    Eigen::Index offset = 0;
    for (auto& layer : layers_) {
        layer.weight.reshaped() = p.segment(offset, layer.weight.size());
        offset += layer.weight.size();
        layer.bias = p.segment(offset, layer.bias.size());
        offset += layer.bias.size();
    }
}

Eigen::VectorXd Mlp::mask_vector() const {
    Eigen::VectorXd m(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index offset = 0;
    for (const auto& layer : layers_) {
        m.segment(offset, layer.mask.size()) = layer.mask.reshaped();
        offset += layer.mask.size();
        m.segment(offset, layer.bias.size()).setOnes();
        offset += layer.bias.size();
    }
    return m;
}

void Mlp::prune(double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw DomainError("Mlp: pruning fraction must lie in [0, 1]");
    }
    struct Ref {
        std::size_t layer;
        Eigen::Index index;
        double magnitude;
    };
    std::vector<Ref> refs;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (Eigen::Index i = 0; i < layers_[l].weight.size(); ++i) {
            refs.push_back({l, i, std::abs(layers_[l].weight.reshaped()(i))});
        }
    }
    const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(refs.size())));
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.magnitude < b.magnitude; });
    for (std::size_t k = 0; k < count; ++k) {
        auto& layer = layers_[refs[k].layer];
        layer.weight.reshaped()(refs[k].index) = 0.0;
        layer.mask.reshaped()(refs[k].index) = 0.0;
    }
}

std::size_t Mlp::pruned_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_) {
        n += static_cast<std::size_t>((layer.mask.array() == 0.0).count());
    }
    return n;
}

Adam::Adam(std::size_t size, double learning_rate, double beta1, double beta2, double epsilon)
    : m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size))),
      v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size))),
      lr_(learning_rate),
      beta1_(beta1),
      beta2_(beta2),
      eps_(epsilon) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, const Eigen::VectorXd& mask) {
    ++t_;
    const Eigen::VectorXd g = grad.cwiseProduct(mask);
    m_ = beta1_ * m_ + (1.0 - beta1_) * g;
    v_ = beta2_ * v_ + (1.0 - beta2_) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_) * mask.array();
}

void Adam::reset_masked(const Eigen::VectorXd& mask) {
    m_ = m_.cwiseProduct(mask);
    v_ = v_.cwiseProduct(mask);
}

}  // namespace optrisk
