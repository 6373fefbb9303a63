#include <cstdio>
#include <cuda_runtime.h>

__global__ void accuracy_kernel(const int* labels, const float* preds, int n, int classes, int* correct) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i >= n) return;
    int best = 0;
    float best_v = preds[i * classes];
    for (int c = 1; c < classes; ++c) {
        float v = preds[i * classes + c];
        if (v > best_v) {
            best_v = v;
            best = c;
        }
    }
    if (best == labels[i]) atomicAdd(correct, 1);
}

int main() {
    const int n = 1 << 20, classes = 10;
    int *labels, *correct;
    float* preds;
    cudaMallocManaged(&labels, n * sizeof(int));
    cudaMallocManaged(&preds, n * classes * sizeof(float));
    cudaMallocManaged(&correct, sizeof(int));
    for (int i = 0; i < n; ++i) {
        labels[i] = i % classes;
        for (int c = 0; c < classes; ++c) preds[i * classes + c] = (c == (i * 3) % classes) ? 1.0f : 0.0f;
    }
    *correct = 0;
    accuracy_kernel<<<(n + 255) / 256, 256>>>(labels, preds, n, classes, correct);
    cudaDeviceSynchronize();
    std::printf("accuracy=%f\n", static_cast<double>(*correct) / n);
    return 0;
}
