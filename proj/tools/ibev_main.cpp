#include <cstdio>

int main() {
    std::puts("ibev: work in progress");
    return 0;
}
