#include "reettt/tensor.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>

namespace reettt {

namespace {

// FFTW plans bound to private buffers, one per (H, W, direction). Planning and
// execution on the shared buffers are serialized by the mutex.
class PlanCache {
public:
    ~PlanCache() {
        for (auto& [key, p] : plans_) {
            fftw_destroy_plan(p.plan);
            fftw_free(p.buf);
        }
    }

    // Transforms `planes` complex H*W planes in place (interleaved re/im).
    void run(std::size_t h, std::size_t w, int sign, std::vector<double>& planes, std::size_t count) {
        std::lock_guard lock(mu_);
        auto key = std::make_tuple(h, w, sign);
        auto it = plans_.find(key);
        if (it == plans_.end()) {
            Entry e;
            e.buf = fftw_alloc_complex(h * w);
            e.plan = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), e.buf, e.buf, sign, FFTW_ESTIMATE);
            it = plans_.emplace(key, e).first;
        }
        const std::size_t n = h * w;
        for (std::size_t c = 0; c < count; ++c) {
            double* p = planes.data() + 2 * n * c;
            std::copy_n(p, 2 * n, reinterpret_cast<double*>(it->second.buf));
            fftw_execute(it->second.plan);
            std::copy_n(reinterpret_cast<double*>(it->second.buf), 2 * n, p);
        }
    }

private:
    struct Entry {
        fftw_complex* buf = nullptr;
        fftw_plan plan = nullptr;
    };
    std::mutex mu_;
    std::map<std::tuple<std::size_t, std::size_t, int>, Entry> plans_;
};

PlanCache& plan_cache() {
    static PlanCache cache;
    return cache;
}

}  // namespace

Tensor dft2(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("dft2: need at least [H,W]");
    const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
    if (h == 0 || w == 0) throw ShapeError("dft2: empty extent");
    check_finite(x.data(), "dft2 input");
    const std::size_t n = h * w, planes = x.numel() / n;

    std::vector<double> work(2 * n * planes, 0.0);
    auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < n; ++i) work[2 * (p * n + i)] = xv[p * n + i];
    plan_cache().run(h, w, FFTW_FORWARD, work, planes);

    std::vector<double> out(2 * n * planes);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < n; ++i) {
            out[(2 * p) * n + i] = work[2 * (p * n + i)];
            out[(2 * p + 1) * n + i] = work[2 * (p * n + i) + 1];
        }

    Shape out_shape(x.shape().begin(), x.shape().end() - 2);
    out_shape.insert(out_shape.end(), {2, h, w});
    return detail::make_result("dft2", std::move(out_shape), std::move(out), {x}, [&] {
        // The adjoint of F is conj(F)^T: dx = Re(sum_uv G(u,v) e^{+i theta}).
        return [x, h, w, n, planes](std::span<const double> g) {
            std::vector<double> work(2 * n * planes);
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t i = 0; i < n; ++i) {
                    work[2 * (p * n + i)] = g[(2 * p) * n + i];
                    work[2 * (p * n + i) + 1] = g[(2 * p + 1) * n + i];
                }
            plan_cache().run(h, w, FFTW_BACKWARD, work, planes);
            std::vector<double> dx(n * planes);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = work[2 * i];
            detail::accumulate(x.impl(), dx);
        };
    });
}

}  // namespace reettt
